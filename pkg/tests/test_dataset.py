import io
import hashlib

import numpy as np
import pytest

from gripcvae.collision import default_policy, is_valid
from gripcvae.dataset import (DatasetError, dataset_stats, generate,
                              ingest_external_configs, read_dataset,
                              split_dataset, stats_csv, write_dataset,
                              Dataset, DatasetHeader, DatasetRecord)
from gripcvae.pointcloud import PointCloud, SamplingSpec, Variant


def small_dense_spec(seed=0, points=64):
    return SamplingSpec(variant=Variant.FULLY_DENSE, total_points=points, seed=seed)


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def test_generate_single_record_zero_joint_hand(single_link):
    ds = generate(single_link, small_dense_spec(points=16),
                  default_policy(single_link), count=1, global_seed=5)
    assert len(ds) == 1
    assert dataset_stats(ds).retention_rate == 1.0
    assert ds.records[0].normalized.shape == (0,)
    assert ds.records[0].cloud.n_points == 16


def test_generate_deterministic_bytes(al16, tmp_path):
    spec = small_dense_spec(seed=7)
    policy = default_policy(al16)
    paths = []
    for run in range(2):
        ds = generate(al16, spec, policy, count=20, global_seed=123)
        p = tmp_path / f"run{run}.gcvd"
        write_dataset(p, ds)
        paths.append(p)
    assert file_hash(paths[0]) == file_hash(paths[1])


def test_generated_configs_pass_collision_filter(al16):
    spec = small_dense_spec(seed=8)
    policy = default_policy(al16)
    ds = generate(al16, spec, policy, count=30, global_seed=9)
    for rec in ds.records:
        assert is_valid(al16, al16.config(rec.normalized), policy)
    assert ds.header.candidates_tried >= 30
    stats = dataset_stats(ds)
    assert 0 < stats.retention_rate <= 1.0


def test_generate_insufficient_candidates(al16):
    spec = small_dense_spec(seed=10)
    # impossible policy: palm conflicts with everything at huge distance
    policy = default_policy(al16)
    delta = policy.delta.copy()
    delta[:, :] = 1e6
    np.fill_diagonal(delta, 0)
    from gripcvae.collision import CollisionPolicy
    impossible = CollisionPolicy(delta, policy.mu)
    with pytest.raises(DatasetError, match="collision"):
        generate(al16, spec, impossible, count=2, global_seed=1, candidate_cap=50)


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------

def test_split_sizes_and_disjointness(al16):
    ds = generate(al16, small_dense_spec(seed=11), default_policy(al16),
                  count=10, global_seed=2)
    train, test = split_dataset(ds, 0.8, seed=3)
    assert len(train) == 8 and len(test) == 2
    assert train.header.split == "train" and test.header.split == "test"
    seeds_train = {r.record_seed for r in train.records}
    seeds_test = {r.record_seed for r in test.records}
    assert not seeds_train & seeds_test


def test_split_union_preserves_multiset(al16):
    ds = generate(al16, small_dense_spec(seed=12), default_policy(al16),
                  count=13, global_seed=4)
    train, test = split_dataset(ds, 0.8, seed=5)
    combined = sorted([r.record_seed for r in train.records]
                      + [r.record_seed for r in test.records])
    assert combined == sorted(r.record_seed for r in ds.records)


def test_split_seed_behavior(al16):
    ds = generate(al16, small_dense_spec(seed=13), default_policy(al16),
                  count=12, global_seed=6)
    a1, b1 = split_dataset(ds, 0.75, seed=7)
    a2, b2 = split_dataset(ds, 0.75, seed=7)
    a3, b3 = split_dataset(ds, 0.75, seed=8)
    assert [r.record_seed for r in a1.records] == [r.record_seed for r in a2.records]
    assert (len(a3), len(b3)) == (len(a1), len(b1))
    assert [r.record_seed for r in a3.records] != [r.record_seed for r in a1.records]


def test_split_rejects_bad_fraction(al16):
    ds = generate(al16, small_dense_spec(seed=14), default_policy(al16),
                  count=4, global_seed=1)
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(DatasetError, match="fraction"):
            split_dataset(ds, bad, seed=0)


# ---------------------------------------------------------------------------
# Stats
# ---------------------------------------------------------------------------

def _synthetic_dataset(configs, variant=Variant.FULLY_DENSE):
    records = []
    for i, c in enumerate(configs):
        cloud = PointCloud(np.zeros((1, 3), dtype="<f4") + i,
                           np.tile([0, 0, 1.0], (1, 1)).astype("<f4"),
                           np.zeros(1, dtype=np.int64), variant)
        records.append(DatasetRecord(i, np.asarray(c, dtype=np.float64), cloud))
    header = DatasetHeader(variant, len(configs[0]), 1, len(records),
                           "synthetic", 0, "all", candidates_tried=len(records))
    return Dataset(header, tuple(records))


def test_stats_constant_dataset():
    ds = _synthetic_dataset([np.full(4, 0.5)] * 6)
    s = dataset_stats(ds)
    assert s.pooled_std == 0.0
    assert np.allclose(s.per_joint_mean, 0.5)


def test_stats_two_extremes():
    ds = _synthetic_dataset([np.zeros(3), np.ones(3)])
    s = dataset_stats(ds)
    # closed-form population std of {0, 1} is exactly 0.5
    assert np.allclose(s.per_joint_std, 0.5, atol=1e-15)
    assert s.pooled_std == pytest.approx(0.5, abs=1e-15)


def test_stats_csv_contains_all_sections():
    ds = _synthetic_dataset([np.zeros(2), np.ones(2)])
    text = stats_csv(dataset_stats(ds))
    assert "joint,mean,std" in text
    assert "pooled" in text and "retention" in text
    assert "bin_lo" in text


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def test_ingest_lower_limits_normalize_to_zero(al16):
    row = ",".join(repr(float(v)) for v in al16.limits_lo)
    ds, clamped = ingest_external_configs(row, al16, small_dense_spec(seed=15))
    assert clamped == 0
    assert np.allclose(ds.records[0].normalized, 0.0, atol=1e-12)


def test_ingest_wrong_column_count(al16):
    row = ",".join(["0.1"] * 15)
    with pytest.raises(DatasetError, match="15"):
        ingest_external_configs(row, al16, small_dense_spec())


def test_ingest_reports_bad_cell(al16):
    row = ",".join(["0.1"] * 16)
    bad = row.replace("0.1", "oops", 1)
    with pytest.raises(DatasetError, match=r"row 1, column 1"):
        ingest_external_configs(bad, al16, small_dense_spec())


def test_ingest_round_trip_radians(al16):
    rng = np.random.default_rng(16)
    lo, hi = al16.limits_lo, al16.limits_hi
    rows = rng.uniform(lo, hi, (100, 16))
    csv_text = "\n".join(",".join(repr(float(v)) for v in row) for row in rows)
    ds, clamped = ingest_external_configs(csv_text, al16, small_dense_spec(seed=17))
    assert clamped == 0
    for rec, row in zip(ds.records, rows):
        back = al16.config(rec.normalized).radians
        assert np.abs(back - row).max() < 1e-9


def test_ingest_clamps_and_counts(al16):
    hi = al16.limits_hi.copy()
    hi[0] += 0.5  # one clearly outside value
    row = ",".join(repr(float(v)) for v in hi)
    ds, clamped = ingest_external_configs(row, al16, small_dense_spec(seed=18))
    assert clamped == 1
    assert ds.records[0].normalized[0] == pytest.approx(1.0)


def test_ingest_skips_header_row(al16):
    header = ",".join(f"j{i}" for i in range(16))
    row = ",".join("0.0" for _ in range(16))
    ds, _ = ingest_external_configs(header + "\n" + row, al16,
                                    small_dense_spec(seed=19))
    assert len(ds) == 1


def test_ingest_applies_no_collision_filter(al16):
    from conftest import THUMB_ON_FINGER1
    radians = al16.config(THUMB_ON_FINGER1).radians
    row = ",".join(repr(float(v)) for v in radians)
    ds, _ = ingest_external_configs(row, al16, small_dense_spec(seed=20))
    assert len(ds) == 1  # colliding external config is kept


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_round_trip_bit_identical(al16, tmp_path):
    ds = generate(al16, small_dense_spec(seed=21), default_policy(al16),
                  count=8, global_seed=22)
    p1 = tmp_path / "a.gcvd"
    p2 = tmp_path / "b.gcvd"
    write_dataset(p1, ds)
    again = read_dataset(p1)
    write_dataset(p2, again)
    assert file_hash(p1) == file_hash(p2)
    assert again.header == ds.header
    for a, b in zip(ds.records, again.records):
        assert a.record_seed == b.record_seed
        assert (a.normalized == b.normalized).all()
        assert (a.cloud.points == b.cloud.points).all()
        assert (a.cloud.normals == b.cloud.normals).all()
        assert (a.cloud.link_ids == b.cloud.link_ids).all()


def test_read_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.gcvd"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DatasetError, match="magic"):
        read_dataset(p)


def test_read_rejects_trailing_bytes(al16, tmp_path):
    ds = generate(al16, small_dense_spec(seed=23), default_policy(al16),
                  count=2, global_seed=24)
    p = tmp_path / "t.gcvd"
    write_dataset(p, ds)
    with open(p, "ab") as f:
        f.write(b"x")
    with pytest.raises(DatasetError, match="trailing"):
        read_dataset(p)
