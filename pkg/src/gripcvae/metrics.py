"""Joint-space and Cartesian-space evaluation of a trained estimator.

Percentage errors are normalized by the maximum achievable error: the full
joint range per joint, and per keypoint the maximal Euclidean distance
between its extreme positions over the range of motion (corner sweep of
each link's ancestor joints plus random probes). Keypoints with zero
mobility (e.g. the palm) have no valid normalizer and are excluded from
Cartesian percentages, reported separately.
"""

from __future__ import annotations

import csv
import io
import itertools
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cvae
from .dataset import Dataset
from .hand import HandModel, JointConfig, forward_kinematics, link_keypoints
from .seeds import mix64


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Normalizers:
    joint_range_rad: np.ndarray  # (N,) limit_hi - limit_lo
    keypoint_max_displacement: np.ndarray  # (L,) mm; 0 for immobile keypoints

    def __post_init__(self):
        if (self.joint_range_rad <= 0).any():
            raise EvalError("joint ranges must be strictly positive")


@dataclass(frozen=True)
class MetricReport:
    mean_joint_error_rad: float
    std_joint_error_rad: float
    mean_joint_error_pct: float
    mean_cartesian_error_mm: float
    std_cartesian_error_mm: float
    mean_cartesian_error_pct: float
    lowest_joint_error_rad: float
    lowest_joint_error_std: float
    lowest_cartesian_error_mm: float
    lowest_cartesian_error_std: float
    inference_time_ms: float
    samples_per_record: int
    record_count: int
    immobile_keypoints: tuple  # link names excluded from the pct normalizer
    hardware: str


def joint_error(q_true: JointConfig, q_pred: JointConfig, model: HandModel) -> tuple:
    """(mean abs error in rad, mean per-joint percentage of range)."""
    if len(q_true.normalized) != model.n_joints or len(q_pred.normalized) != model.n_joints:
        raise EvalError("configuration size does not match the model")
    d_rad = np.abs(q_true.radians - q_pred.radians)
    rng = model.limits_hi - model.limits_lo
    return float(d_rad.mean()), float((100.0 * d_rad / rng).mean())


def cartesian_error(q_true: JointConfig, q_pred: JointConfig, model: HandModel,
                    normalizers: Normalizers | None = None) -> tuple:
    """(mean keypoint distance in mm, mean percentage of max displacement).

    pct is NaN when normalizers are not supplied.
    """
    k_true = link_keypoints(model, q_true)
    k_pred = link_keypoints(model, q_pred)
    d = np.linalg.norm(k_true - k_pred, axis=1)
    mm = float(d.mean())
    if normalizers is None:
        return mm, float("nan")
    disp = normalizers.keypoint_max_displacement
    mobile = disp > 0
    if not mobile.any():
        return mm, float("nan")
    return mm, float((100.0 * d[mobile] / disp[mobile]).mean())


def max_keypoint_displacement(model: HandModel, sample_budget: int = 256,
                              seed: int = 0) -> Normalizers:
    """Per-keypoint maximum pairwise distance over all joint-limit corner
    combinations of the keypoint's ancestor joints plus random probes."""
    rng = np.random.default_rng(mix64(seed, 0x0D15))
    probes = rng.uniform(0.0, 1.0, (sample_budget, model.n_joints))
    probe_kps = np.stack([link_keypoints(model, model.config(p)) for p in probes]) \
        if sample_budget else np.zeros((0, model.n_links, 3))
    disp = np.zeros(model.n_links)
    for lid in range(model.n_links):
        ancestors = model.ancestor_joints(lid)
        positions = [probe_kps[i, lid] for i in range(len(probes))]
        if len(ancestors) <= 16:
            for corner in itertools.product((0.0, 1.0), repeat=len(ancestors)):
                normalized = np.full(model.n_joints, 0.5)
                for j, v in zip(ancestors, corner):
                    normalized[j] = v
                positions.append(link_keypoints(model, model.config(normalized))[lid])
        pts = np.asarray(positions)
        if len(pts) >= 2:
            diff = pts[:, None, :] - pts[None, :, :]
            disp[lid] = float(np.sqrt((diff**2).sum(axis=2)).max())
    return Normalizers(model.limits_hi - model.limits_lo, disp)


def mean_predictor_baseline(train_normalized: np.ndarray,
                            test_normalized: np.ndarray,
                            model: HandModel) -> float:
    """Mean joint error (rad) of the constant train-mean predictor."""
    rng = model.limits_hi - model.limits_lo
    center = train_normalized.mean(axis=0)
    return float((np.abs(test_normalized - center) * rng).mean())


# ---------------------------------------------------------------------------
# Evaluation over a dataset
# ---------------------------------------------------------------------------

def evaluate(dataset: Dataset, model: HandModel, sample_fn, K: int = 8,
             seed: int = 0, normalizers: Normalizers | None = None,
             inference_time_ms: float = float("nan"),
             record_offset: int = 0) -> tuple:
    """Run `sample_fn(cloud_points_mm, num_samples, seed) -> (K, N)` over all
    records; primary metrics use sample 0. Returns (MetricReport, rows).

    record_offset shifts record indices and per-record seeds, so chunked
    evaluation of a dataset reproduces the unchunked rows exactly.
    """
    if len(dataset.records) == 0:
        raise EvalError("dataset is empty")
    if normalizers is None:
        normalizers = max_keypoint_displacement(model)
    rows = []
    for local, rec in enumerate(dataset.records):
        i = record_offset + local
        preds = np.asarray(sample_fn(rec.cloud.points, K, mix64(seed, i)))
        if preds.shape != (K, model.n_joints):
            raise EvalError(f"sample_fn returned shape {preds.shape}, "
                            f"expected {(K, model.n_joints)}")
        q_true = model.config(rec.normalized)
        j_rads, c_mms = [], []
        for k in range(K):
            q_pred = model.config(preds[k])
            jr, jp = joint_error(q_true, q_pred, model)
            cm, cp = cartesian_error(q_true, q_pred, model, normalizers)
            j_rads.append(jr)
            c_mms.append(cm)
            if k == 0:
                row = {"record": i, "joint_rad": jr, "joint_pct": jp,
                       "cartesian_mm": cm, "cartesian_pct": cp}
        row["lowest_joint_rad"] = min(j_rads)
        row["lowest_cartesian_mm"] = min(c_mms)
        rows.append(row)
    report = aggregate(rows, K, inference_time_ms, model, normalizers)
    return report, rows


def aggregate(rows, K: int, inference_time_ms: float, model: HandModel,
              normalizers: Normalizers) -> MetricReport:
    arr = {k: np.array([r[k] for r in rows]) for k in rows[0] if k != "record"}
    immobile = tuple(model.links[i].name
                     for i in np.nonzero(normalizers.keypoint_max_displacement == 0)[0])
    return MetricReport(
        mean_joint_error_rad=float(arr["joint_rad"].mean()),
        std_joint_error_rad=float(arr["joint_rad"].std()),
        mean_joint_error_pct=float(arr["joint_pct"].mean()),
        mean_cartesian_error_mm=float(arr["cartesian_mm"].mean()),
        std_cartesian_error_mm=float(arr["cartesian_mm"].std()),
        mean_cartesian_error_pct=float(arr["cartesian_pct"].mean()),
        lowest_joint_error_rad=float(arr["lowest_joint_rad"].mean()),
        lowest_joint_error_std=float(arr["lowest_joint_rad"].std()),
        lowest_cartesian_error_mm=float(arr["lowest_cartesian_mm"].mean()),
        lowest_cartesian_error_std=float(arr["lowest_cartesian_mm"].std()),
        inference_time_ms=inference_time_ms,
        samples_per_record=K,
        record_count=len(rows),
        immobile_keypoints=immobile,
        hardware=platform.processor() or platform.machine(),
    )


def time_per_sample(predict_batch_fn, clouds: np.ndarray,
                    batch_size: int = 100, repeats: int = 3) -> float:
    """Mean wall-clock milliseconds per sample over batched inference."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        done = 0
        for lo in range(0, len(clouds), batch_size):
            predict_batch_fn(clouds[lo:lo + batch_size])
            done += min(batch_size, len(clouds) - lo)
        best = min(best, (time.perf_counter() - t0) / done)
    return best * 1e3


# ---------------------------------------------------------------------------
# Checkpoint-level entry point
# ---------------------------------------------------------------------------

def evaluate_checkpoint(checkpoint_path, dataset: Dataset, model: HandModel,
                        K: int = 8, seed: int = 0,
                        timing_records: int = 500) -> tuple:
    params, _, meta = ad.load_checkpoint(checkpoint_path)
    if meta.get("hand_name") != dataset.header.hand_name:
        raise EvalError(f"checkpoint hand {meta.get('hand_name')!r} does not "
                        f"match dataset hand {dataset.header.hand_name!r}")
    if meta.get("variant") != dataset.header.variant.value:
        raise EvalError(f"checkpoint variant {meta.get('variant')!r} does not "
                        f"match dataset variant {dataset.header.variant.value!r}")
    if model.name != dataset.header.hand_name:
        raise EvalError(f"hand model {model.name!r} does not match dataset")
    scale = meta["scale_mm"]
    latent_dim = meta["config"]["latent_dim"]

    def sample_fn(points_mm, num_samples, s):
        return cvae.infer(params, np.asarray(points_mm) / scale, latent_dim,
                          num_samples, s)

    clouds = np.stack([r.cloud.points for r in dataset.records[:timing_records]])
    clouds = clouds.astype(np.float32) / np.float32(scale)
    zeros = np.zeros((len(clouds), latent_dim), dtype=np.float32)

    def predict_batch(batch):
        return cvae.infer_batch(params, batch, zeros[: len(batch)])

    ms = time_per_sample(predict_batch, clouds)
    normalizers = max_keypoint_displacement(model)
    return evaluate(dataset, model, sample_fn, K=K, seed=seed,
                    normalizers=normalizers, inference_time_ms=ms)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def rows_csv(rows) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                    for k, v in r.items()})
    return out.getvalue()


def summary_csv(report: MetricReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["hardware", report.hardware])
    w.writerow(["records", report.record_count])
    w.writerow(["samples_per_record", report.samples_per_record])
    w.writerow(["immobile_keypoints", ";".join(report.immobile_keypoints)])
    w.writerow(["metric", "mean", "std", "pct"])
    w.writerow(["joint_error_rad", f"{report.mean_joint_error_rad:.9g}",
                f"{report.std_joint_error_rad:.9g}",
                f"{report.mean_joint_error_pct:.9g}"])
    w.writerow(["lowest_joint_error_rad", f"{report.lowest_joint_error_rad:.9g}",
                f"{report.lowest_joint_error_std:.9g}", ""])
    w.writerow(["cartesian_error_mm", f"{report.mean_cartesian_error_mm:.9g}",
                f"{report.std_cartesian_error_mm:.9g}",
                f"{report.mean_cartesian_error_pct:.9g}"])
    w.writerow(["lowest_cartesian_error_mm",
                f"{report.lowest_cartesian_error_mm:.9g}",
                f"{report.lowest_cartesian_error_std:.9g}", ""])
    w.writerow(["inference_time_ms", f"{report.inference_time_ms:.9g}", "", ""])
    return out.getvalue()


def histogram_data(dataset: Dataset, predictions: np.ndarray | None = None,
                   bins: int = 20) -> str:
    """Gnuplot-friendly per-joint histograms of normalized values: columns
    joint, bin_center, true_count[, predicted_count]."""
    q = dataset.configs()
    lines = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    for j in range(q.shape[1]):
        h_true = np.histogram(q[:, j], bins=bins, range=(0.0, 1.0))[0]
        h_pred = (np.histogram(predictions[:, j], bins=bins, range=(0.0, 1.0))[0]
                  if predictions is not None else None)
        for b in range(bins):
            row = f"{j} {centers[b]:.4f} {h_true[b]}"
            if h_pred is not None:
                row += f" {h_pred[b]}"
            lines.append(row)
        lines.append("")
    return "\n".join(lines) + "\n"
