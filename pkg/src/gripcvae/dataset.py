"""Dataset generation, the .gcvd binary container, splitting and statistics.

See docs/dataset-format.md for the byte-level layout. Records are
regenerable independently: candidate i draws from seed mix64(global_seed, i),
so generation can be chunked across workers and merged in index order
without changing a single byte of output.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .collision import CollisionPolicy, is_valid
from .hand import HandModel
from .pointcloud import (PointCloud, SamplingSpec, SurfaceTemplate, Variant,
                         build_cloud, sample_link_surfaces)
from .seeds import mix64, rng_for

MAGIC = b"GCVD"
FORMAT_VERSION = 1

_VARIANT_CODE = {Variant.FULLY_DENSE: 0, Variant.CLUSTER: 1, Variant.HANDPRINT: 2}
_VARIANT_FROM_CODE = {v: k for k, v in _VARIANT_CODE.items()}
_SPLIT_CODE = {"all": 0, "train": 1, "test": 2}
_SPLIT_FROM_CODE = {v: k for k, v in _SPLIT_CODE.items()}

DEFAULT_CANDIDATE_FACTOR = 100


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHeader:
    variant: Variant
    n_joints: int
    points_per_record: int  # 0 = variable
    record_count: int
    hand_name: str
    global_seed: int
    split: str = "all"
    candidates_tried: int = 0  # generation only; 0 when not applicable
    version: int = FORMAT_VERSION


@dataclass(frozen=True)
class DatasetRecord:
    record_seed: int
    normalized: np.ndarray  # (N,) float64 in [0, 1]
    cloud: PointCloud


@dataclass(frozen=True)
class Dataset:
    header: DatasetHeader
    records: tuple

    def __len__(self):
        return len(self.records)

    def configs(self) -> np.ndarray:
        return np.stack([r.normalized for r in self.records])


@dataclass(frozen=True)
class DatasetStats:
    per_joint_mean: np.ndarray
    per_joint_std: np.ndarray  # population std, normalized units
    pooled_std: float
    retention_rate: float
    histogram: np.ndarray  # (N, bins) counts over [0, 1]

    BINS = 20


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

def _write_str(f, s: str):
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    return _read_exact(f, n).decode("utf-8")


def write_dataset(path, dataset: Dataset):
    h = dataset.header
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBBHIQQQ", h.version, _VARIANT_CODE[h.variant],
                            _SPLIT_CODE[h.split], h.n_joints, h.points_per_record,
                            len(dataset.records), h.global_seed, h.candidates_tried))
        _write_str(f, h.hand_name)
        for rec in dataset.records:
            n = rec.cloud.n_points
            f.write(struct.pack("<Q", rec.record_seed))
            f.write(np.asarray(rec.normalized, dtype="<f8").tobytes())
            f.write(struct.pack("<I", n))
            f.write(np.asarray(rec.cloud.points, dtype="<f4").tobytes())
            f.write(np.asarray(rec.cloud.normals, dtype="<f4").tobytes())
            f.write(np.asarray(rec.cloud.link_ids, dtype="<u2").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise DatasetError(f"{path}: not a GCVD dataset (bad magic)")
        version, vcode, scode, n_joints, ppr, count, seed, tried = struct.unpack(
            "<HBBHIQQQ", _read_exact(f, 34))
        if version != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported format version {version}")
        if vcode not in _VARIANT_FROM_CODE or scode not in _SPLIT_FROM_CODE:
            raise DatasetError(f"{path}: corrupt header enums ({vcode}, {scode})")
        hand_name = _read_str(f)
        header = DatasetHeader(_VARIANT_FROM_CODE[vcode], n_joints, ppr, count,
                               hand_name, seed, _SPLIT_FROM_CODE[scode], tried, version)
        records = []
        for _ in range(count):
            (rseed,) = struct.unpack("<Q", _read_exact(f, 8))
            normalized = np.frombuffer(_read_exact(f, 8 * n_joints), dtype="<f8").copy()
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            pts = np.frombuffer(_read_exact(f, 12 * n), dtype="<f4").reshape(n, 3).copy()
            nrm = np.frombuffer(_read_exact(f, 12 * n), dtype="<f4").reshape(n, 3).copy()
            ids = np.frombuffer(_read_exact(f, 2 * n), dtype="<u2").copy()
            records.append(DatasetRecord(
                rseed, normalized,
                PointCloud(pts, nrm, ids.astype(np.int64), header.variant)))
        if f.read(1):
            raise DatasetError(f"{path}: trailing bytes after {count} records")
    return Dataset(header, tuple(records))


def _to_storage(cloud: PointCloud) -> PointCloud:
    """Cast to the on-disk precision so write/read round-trips bit-exactly."""
    return PointCloud(cloud.points.astype("<f4"), cloud.normals.astype("<f4"),
                      cloud.link_ids, cloud.variant)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def candidate_config(model: HandModel, global_seed: int, index: int):
    """The index-th candidate: (record_seed, normalized draw)."""
    rseed = mix64(global_seed, index)
    rng = np.random.Generator(np.random.PCG64(rseed))
    return rseed, rng.uniform(0.0, 1.0, model.n_joints)


def generate_records(model: HandModel, spec: SamplingSpec, policy: CollisionPolicy,
                     count: int, global_seed: int,
                     template: SurfaceTemplate | None = None,
                     candidate_cap: int | None = None,
                     index_range=None):
    """Yield (candidate_index, record) for collision-valid candidates.

    With index_range=(lo, hi) only candidates in [lo, hi) are examined and
    no count cutoff applies; callers merging chunks re-apply the cutoff.
    """
    if template is None:
        template = sample_link_surfaces(model, spec)
    if index_range is not None:
        indices = range(*index_range)
    else:
        cap = candidate_cap if candidate_cap is not None else DEFAULT_CANDIDATE_FACTOR * count
        indices = range(cap)
    produced = 0
    for i in indices:
        if index_range is None and produced >= count:
            return
        rseed, normalized = candidate_config(model, global_seed, i)
        q = model.config(normalized)
        if not is_valid(model, q, policy):
            continue
        cloud = _to_storage(build_cloud(model, q, template))
        produced += 1
        yield i, DatasetRecord(rseed, normalized, cloud)


def generate(model: HandModel, spec: SamplingSpec, policy: CollisionPolicy,
             count: int, global_seed: int,
             candidate_cap: int | None = None) -> Dataset:
    """Draw-then-filter generation: keep the first `count` valid candidates."""
    if count < 1:
        raise DatasetError("record count must be >= 1")
    records = []
    last_index = -1
    for i, rec in generate_records(model, spec, policy, count, global_seed,
                                   candidate_cap=candidate_cap):
        records.append(rec)
        last_index = i
    if len(records) < count:
        cap = candidate_cap if candidate_cap is not None else DEFAULT_CANDIDATE_FACTOR * count
        raise DatasetError(
            f"only {len(records)} of {count} configurations passed the collision "
            f"filter within {cap} candidates; relax the policy or raise the cap")
    ppr = records[0].cloud.n_points
    if any(r.cloud.n_points != ppr for r in records):
        ppr = 0
    header = DatasetHeader(spec.variant, model.n_joints, ppr, count, model.name,
                           global_seed, "all", candidates_tried=last_index + 1)
    return Dataset(header, tuple(records))


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------

def split_dataset(dataset: Dataset, train_fraction: float = 0.8,
                  seed: int = 0) -> tuple:
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction must be in (0, 1), got {train_fraction}")
    m = len(dataset.records)
    if m < 2:
        raise DatasetError("need at least 2 records to split")
    n_train = int(round(train_fraction * m))
    n_train = min(max(n_train, 1), m - 1)
    perm = rng_for(seed, 0).permutation(m)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    parts = []
    for name, idx in (("train", train_idx), ("test", test_idx)):
        header = replace(dataset.header, split=name, record_count=len(idx),
                         candidates_tried=0)
        parts.append(Dataset(header, tuple(dataset.records[i] for i in idx)))
    return tuple(parts)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def dataset_stats(dataset: Dataset) -> DatasetStats:
    if len(dataset.records) == 0:
        raise DatasetError("dataset is empty")
    q = dataset.configs()
    mean = q.mean(axis=0)
    std = q.std(axis=0)  # population std, to compare against 1/sqrt(12)
    pooled = float(np.sqrt(q.var(axis=0).mean())) if q.shape[1] else 0.0
    tried = dataset.header.candidates_tried
    retention = len(dataset.records) / tried if tried > 0 else 1.0
    hist = np.stack([np.histogram(q[:, j], bins=DatasetStats.BINS,
                                  range=(0.0, 1.0))[0]
                     for j in range(q.shape[1])]) if q.shape[1] else \
        np.zeros((0, DatasetStats.BINS), dtype=np.int64)
    return DatasetStats(mean, std, pooled, retention, hist)


def stats_csv(stats: DatasetStats) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["joint", "mean", "std"])
    for j, (m, s) in enumerate(zip(stats.per_joint_mean, stats.per_joint_std)):
        w.writerow([j, f"{m:.9g}", f"{s:.9g}"])
    w.writerow(["pooled", "", f"{stats.pooled_std:.9g}"])
    w.writerow(["retention", "", f"{stats.retention_rate:.9g}"])
    w.writerow([])
    w.writerow(["joint", "bin_lo", "bin_hi", "count"])
    edges = np.linspace(0.0, 1.0, DatasetStats.BINS + 1)
    for j in range(stats.histogram.shape[0]):
        for b in range(DatasetStats.BINS):
            w.writerow([j, f"{edges[b]:.4f}", f"{edges[b + 1]:.4f}",
                        int(stats.histogram[j, b])])
    return out.getvalue()


# ---------------------------------------------------------------------------
# External configuration ingestion
# ---------------------------------------------------------------------------

LIMIT_TOL = 1e-6  # rad


def ingest_external_configs(csv_text: str, model: HandModel,
                            spec: SamplingSpec) -> tuple:
    """Build a dataset from externally supplied radian configurations.

    No collision filtering is applied. Values outside the joint limits by
    more than LIMIT_TOL are clamped; returns (dataset, clamp_count).
    """
    rows = [r for r in csv.reader(io.StringIO(csv_text)) if r]
    if rows and not any(_is_number(c) for c in rows[0]):
        rows = rows[1:]  # optional label-only header row
    if not rows:
        raise DatasetError("CSV contains no data rows")
    n = model.n_joints
    lo, hi = model.limits_lo, model.limits_hi
    template = sample_link_surfaces(model, spec)
    records = []
    clamped = 0
    for ri, row in enumerate(rows):
        if len(row) != n:
            raise DatasetError(f"row {ri + 1}: expected {n} columns, got {len(row)}")
        try:
            radians = np.array([float(c) for c in row])
        except ValueError:
            bad = next(ci for ci, c in enumerate(row) if not _is_number(c))
            raise DatasetError(f"row {ri + 1}, column {bad + 1}: "
                               f"non-numeric value {row[bad]!r}") from None
        outside = (radians < lo - LIMIT_TOL) | (radians > hi + LIMIT_TOL)
        clamped += int(outside.sum())
        radians = np.clip(radians, lo, hi)
        q = model.config_from_radians(radians)
        cloud = _to_storage(build_cloud(model, q, template))
        records.append(DatasetRecord(mix64(spec.seed, ri), q.normalized, cloud))
    ppr = records[0].cloud.n_points
    if any(r.cloud.n_points != ppr for r in records):
        ppr = 0
    header = DatasetHeader(spec.variant, n, ppr, len(records), model.name,
                           spec.seed, "all", candidates_tried=0)
    return Dataset(header, tuple(records)), clamped


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False

