"""Command-line interface: the full pipeline as subcommands.

Every output-producing subcommand writes a RunManifest JSON next to its
artifact. All randomness flows from one --seed per subcommand (environment
fallback GRIPCVAE_SEED), fanned out internally by deterministic mixing, and
results are independent of --jobs by construction.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from . import cvae, metrics
from .collision import (default_policy, is_valid, policy_from_json,
                        policy_to_json, self_collision_score)
from .dataset import (Dataset, DatasetHeader, generate, generate_records,
                      dataset_stats, ingest_external_configs, read_dataset,
                      split_dataset, stats_csv, write_dataset,
                      DEFAULT_CANDIDATE_FACTOR)
from .hand import forward_kinematics, link_keypoints, load_hand
from .pointcloud import SamplingSpec, Variant, sample_link_surfaces
from .version import __version__


def _env_seed() -> int:
    return int(os.environ.get("GRIPCVAE_SEED", "0"))


def _rpy_of(rotation: np.ndarray) -> np.ndarray:
    from .hand import _rpy_from_rotation
    return _rpy_from_rotation(rotation)


class CliError(Exception):
    pass


def write_manifest(out_path, subcommand: str, args: argparse.Namespace,
                   wall_s: float, outputs: list):
    manifest = {
        "subcommand": subcommand,
        "config": {k: v for k, v in sorted(vars(args).items())
                   if k not in ("func", "dry_run")},
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": [v for k, v in vars(args).items()
                   if k in ("hand", "data", "checkpoint", "csv", "input",
                            "train_data", "test_data") and v],
        "outputs": outputs,
        "tool_version": __version__,
        "wall_time_s": round(wall_s, 3),
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)


def _load_model(args):
    return load_hand(args.hand, getattr(args, "annotations", None))


def _policy_for(args, model):
    if getattr(args, "collision_policy", None):
        with open(args.collision_policy) as f:
            return policy_from_json(f.read(), model)
    return default_policy(model)


def _sampling_spec(args) -> SamplingSpec:
    return SamplingSpec(
        variant=Variant.from_name(args.variant),
        total_points=args.points,
        cluster_radius_fraction=args.cluster_frac,
        handprint_dot_threshold=args.dot_threshold,
        seed=args.seed,
        farthest_point=getattr(args, "fps", False),
    )


def _parse_config_values(text: str, n: int) -> np.ndarray:
    vals = np.array([float(v) for v in text.replace(",", " ").split()])
    if len(vals) != n:
        raise CliError(f"expected {n} joint values, got {len(vals)}")
    return vals


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fk(args):
    model = _load_model(args)
    radians = _parse_config_values(args.config, model.n_joints)
    q = model.config_from_radians(radians)
    transforms = forward_kinematics(model, q)
    for link, t in zip(model.links, transforms):
        xyz = " ".join(f"{v:.6f}" for v in t.translation)
        rpy = " ".join(f"{v:.6f}" for v in _rpy_of(t.rotation))
        print(f"{link.name} xyz[mm]: {xyz} rpy[rad]: {rpy}")
    return 0


def cmd_collision_check(args):
    model = _load_model(args)
    policy = _policy_for(args, model)
    radians = _parse_config_values(args.config, model.n_joints)
    q = model.config_from_radians(radians)
    score = self_collision_score(link_keypoints(model, q), policy)
    verdict = "VALID" if score == 0.0 else "INVALID"
    print(f"self_collision_score: {score:.6f} -> {verdict}")
    return 0


def _gen_chunk(model, spec, policy, count, seed, lo, hi):
    return list(generate_records(model, spec, policy, count, seed,
                                 index_range=(lo, hi)))


def cmd_gen(args):
    model = _load_model(args)
    spec = _sampling_spec(args)
    policy = _policy_for(args, model)
    t0 = time.perf_counter()
    cap = args.candidate_cap or DEFAULT_CANDIDATE_FACTOR * args.count
    if args.jobs > 1:
        chunk = max(256, cap // (args.jobs * 8))
        found = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_gen_chunk, model, spec, policy, args.count,
                                   args.seed, lo, min(lo + chunk, cap))
                       for lo in range(0, cap, chunk)]
            for fut in futures:
                found.extend(fut.result())
                if len(found) >= args.count:
                    break
        found.sort(key=lambda pair: pair[0])
        found = found[: args.count]
        if len(found) < args.count:
            raise CliError(f"only {len(found)} of {args.count} configurations "
                           f"passed the collision filter within {cap} candidates")
        records = tuple(rec for _, rec in found)
        ppr = records[0].cloud.n_points
        header = DatasetHeader(spec.variant, model.n_joints, ppr, len(records),
                               model.name, args.seed, "all",
                               candidates_tried=found[-1][0] + 1)
        ds = Dataset(header, records)
    else:
        ds = generate(model, spec, policy, args.count, args.seed,
                      candidate_cap=args.candidate_cap)
    write_dataset(args.out, ds)
    s = dataset_stats(ds)
    print(f"wrote {len(ds)} records to {args.out} "
          f"(retention {s.retention_rate:.3f}, pooled std {s.pooled_std:.4f})")
    write_manifest(args.out, "gen", args, time.perf_counter() - t0, [args.out])
    return 0


def cmd_split(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.input)
    train, test = split_dataset(ds, args.fraction, args.seed)
    write_dataset(args.out_train, train)
    write_dataset(args.out_test, test)
    print(f"split {len(ds)} -> {len(train)} train / {len(test)} test")
    for p in (args.out_train, args.out_test):
        write_manifest(p, "split", args, time.perf_counter() - t0,
                       [args.out_train, args.out_test])
    return 0


def cmd_stats(args):
    ds = read_dataset(args.input)
    s = dataset_stats(ds)
    text = stats_csv(s)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(text)
        write_manifest(args.csv, "stats", args, 0.0, [args.csv])
    print(f"records: {len(ds)}  joints: {ds.header.n_joints}  "
          f"variant: {ds.header.variant.value}")
    print(f"pooled std: {s.pooled_std:.4f}  retention: {s.retention_rate:.3f}")
    for j, (m, sd) in enumerate(zip(s.per_joint_mean, s.per_joint_std)):
        print(f"joint {j}: mean {m:.4f} std {sd:.4f}")
    return 0


def cmd_ingest(args):
    model = _load_model(args)
    spec = _sampling_spec(args)
    t0 = time.perf_counter()
    with open(args.csv) as f:
        text = f.read()
    ds, clamped = ingest_external_configs(text, model, spec)
    write_dataset(args.out, ds)
    print(f"ingested {len(ds)} configurations to {args.out} "
          f"({clamped} values clamped to joint limits)")
    write_manifest(args.out, "ingest", args, time.perf_counter() - t0, [args.out])
    return 0


def _apply_config_file(args, argv):
    """TOML-style key=value file; CLI flags given explicitly still win."""
    if not getattr(args, "config_file", None):
        return
    overrides = {}
    with open(args.config_file) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"config file line not key=value: {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            overrides[key.replace("-", "_")] = value
    explicit = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if flag in explicit:
            continue  # CLI beats file
        if not hasattr(args, key):
            raise CliError(f"unknown config key {key!r}")
        current = getattr(args, key)
        cast = type(current) if current is not None else float
        if cast is bool:
            setattr(args, key, value.lower() in ("1", "true", "yes"))
        else:
            setattr(args, key, cast(value))


def cmd_train(args, argv=None):
    _apply_config_file(args, argv or sys.argv[1:])
    model = _load_model(args)
    train_ds = read_dataset(args.train_data)
    test_ds = read_dataset(args.test_data)
    config = cvae.CvaeConfig(latent_dim=args.latent, epochs=args.epochs,
                             batch_size=args.batch_size, lr=args.lr,
                             seed=args.seed)
    t0 = time.perf_counter()

    def log(row):
        if row["epoch"] % args.log_every == 0:
            print(f"epoch {row['epoch']:4d}  beta {row['beta']:.4f}  "
                  f"train {row['train_recon']:.4f}  test {row['test_recon']:.4f}")

    out = cvae.train(train_ds, test_ds, config, model, args.out_dir, log_cb=log)
    wall = time.perf_counter() - t0
    best = min(r["test_recon"] for r in out["result"].history)
    print(f"finished {config.epochs} epochs in {wall / 60:.1f} min; "
          f"best test recon {best:.4f}")
    for p in out["paths"].values():
        print(f"wrote {p}")
    write_manifest(os.path.join(args.out_dir, "train"), "train", args, wall,
                   list(out["paths"].values()))
    return 0


def _eval_chunk(checkpoint, ds_path, hand, annotations, k, seed, lo, hi):
    model = load_hand(hand, annotations)
    ds = read_dataset(ds_path)
    part = Dataset(ds.header, ds.records[lo:hi])
    params, _, meta = ad.load_checkpoint(checkpoint)
    scale, latent = meta["scale_mm"], meta["config"]["latent_dim"]

    def sample_fn(points_mm, num_samples, s):
        return cvae.infer(params, np.asarray(points_mm) / scale, latent,
                          num_samples, s)

    normalizers = metrics.max_keypoint_displacement(model)
    _, rows = metrics.evaluate(part, model, sample_fn, K=k, seed=seed,
                               normalizers=normalizers, record_offset=lo)
    return rows


def cmd_eval(args):
    model = _load_model(args)
    ds = read_dataset(args.data)
    t0 = time.perf_counter()
    if args.jobs > 1 and len(ds.records) > 8:
        chunk = max(8, len(ds.records) // (args.jobs * 4))
        rows = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_eval_chunk, args.checkpoint, args.data,
                                   args.hand, args.annotations, args.k,
                                   args.seed, lo,
                                   min(lo + chunk, len(ds.records)))
                       for lo in range(0, len(ds.records), chunk)]
            for fut in futures:
                rows.extend(fut.result())
        rows.sort(key=lambda r: r["record"])
        # timing pass stays in the parent, single stream
        params, _, meta = ad.load_checkpoint(args.checkpoint)
        scale = meta["scale_mm"]
        latent = meta["config"]["latent_dim"]
        clouds = np.stack([r.cloud.points for r in ds.records[:500]])
        clouds = clouds.astype(np.float32) / np.float32(scale)
        zeros = np.zeros((len(clouds), latent), dtype=np.float32)
        ms = metrics.time_per_sample(
            lambda b: cvae.infer_batch(params, b, zeros[: len(b)]), clouds)
        report = metrics.aggregate(rows, args.k, ms, model,
                                   metrics.max_keypoint_displacement(model))
    else:
        report, rows = metrics.evaluate_checkpoint(args.checkpoint, ds, model,
                                                   K=args.k, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "report.csv")
    summary_path = os.path.join(args.out_dir, "summary.csv")
    with open(report_path, "w") as f:
        f.write(metrics.rows_csv(rows))
    with open(summary_path, "w") as f:
        f.write(metrics.summary_csv(report))
    print(metrics.summary_csv(report))
    outputs = [report_path, summary_path]
    if args.gnuplot:
        hist_path = os.path.join(args.out_dir, "joint_histograms.dat")
        params, _, meta = ad.load_checkpoint(args.checkpoint)
        scale = meta["scale_mm"]
        latent = meta["config"]["latent_dim"]
        clouds = np.stack([r.cloud.points for r in ds.records]).astype(np.float32)
        preds = cvae.infer_batch(params, clouds / np.float32(scale),
                                 np.zeros((len(clouds), latent), dtype=np.float32))
        with open(hist_path, "w") as f:
            f.write(metrics.histogram_data(ds, preds))
        outputs.append(hist_path)
    write_manifest(os.path.join(args.out_dir, "eval"), "eval", args,
                   time.perf_counter() - t0, outputs)
    return 0


def cmd_infer(args):
    model = _load_model(args)
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds.records):
        raise CliError(f"--index {args.index} out of range (0..{len(ds.records) - 1})")
    params, _, meta = ad.load_checkpoint(args.checkpoint)
    if meta.get("hand_name") != model.name:
        raise CliError(f"checkpoint hand {meta.get('hand_name')!r} does not "
                       f"match --hand {model.name!r}")
    cloud = ds.records[args.index].cloud.points / meta["scale_mm"]
    preds = cvae.infer(params, cloud, meta["config"]["latent_dim"],
                       args.samples, args.seed)
    for k, p in enumerate(preds):
        radians = model.config(p).radians
        print(f"sample {k}: " + " ".join(f"{v:.5f}" for v in radians))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gripcvae",
        description="Point-cloud to joint-configuration pipeline for "
                    "multifingered grippers")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=fn)
        p.add_argument("--dry-run", action="store_true",
                       help="validate flags and inputs, write nothing")
        return p

    def hand_args(p):
        p.add_argument("--hand", required=True, help="URDF-subset hand file")
        p.add_argument("--annotations",
                       help="sidecar .hand.json (default: next to --hand)")

    def sampling_args(p):
        p.add_argument("--variant", default="dense",
                       choices=[v.value for v in Variant],
                       help="point cloud variant")
        p.add_argument("--points", type=int, default=512,
                       help="template point count")
        p.add_argument("--cluster-frac", type=float, default=0.5,
                       help="cluster radius as a fraction of link radius")
        p.add_argument("--dot-threshold", type=float, default=0.0,
                       help="handprint normal dot-product threshold")
        p.add_argument("--fps", action="store_true",
                       help="farthest-point post-pass for even spacing")

    def seed_arg(p):
        p.add_argument("--seed", type=int, default=_env_seed(),
                       help="seed (fallback: GRIPCVAE_SEED)")

    p = add("fk", cmd_fk, "forward kinematics of one configuration")
    hand_args(p)
    p.add_argument("--config", required=True,
                   help="comma/space separated joint radians")

    p = add("collision-check", cmd_collision_check,
            "self-collision score of one configuration")
    hand_args(p)
    p.add_argument("--config", required=True,
                   help="comma/space separated joint radians")
    p.add_argument("--collision-policy", help="JSON policy override")

    p = add("gen", cmd_gen, "generate a dataset")
    hand_args(p)
    sampling_args(p)
    seed_arg(p)
    p.add_argument("--count", type=int, required=True, help="records to keep")
    p.add_argument("--out", required=True, help="output .gcvd path")
    p.add_argument("--collision-policy", help="JSON policy override")
    p.add_argument("--candidate-cap", type=int, default=None,
                   help="max candidates (default 100x count)")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: all cores)")

    p = add("split", cmd_split, "split a dataset into train/test")
    seed_arg(p)
    p.add_argument("--in", dest="input", required=True, help="input .gcvd")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--fraction", type=float, default=0.8,
                   help="train fraction")

    p = add("stats", cmd_stats, "dataset diversity statistics")
    p.add_argument("--in", dest="input", required=True, help="input .gcvd")
    p.add_argument("--csv", help="write full stats CSV here")

    p = add("ingest", cmd_ingest, "build a dataset from external configs")
    hand_args(p)
    sampling_args(p)
    seed_arg(p)
    p.add_argument("--csv", required=True, help="CSV of joint radians")
    p.add_argument("--out", required=True, help="output .gcvd path")

    p = add("train", cmd_train, "train the estimator")
    hand_args(p)
    seed_arg(p)
    p.add_argument("--train", dest="train_data", required=True,
                   help="training .gcvd")
    p.add_argument("--test", dest="test_data", required=True,
                   help="held-out .gcvd")
    p.add_argument("--out-dir", required=True, help="checkpoint directory")
    p.add_argument("--config-file", help="key=value overrides")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--log-every", type=int, default=10)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    hand_args(p)
    seed_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation .gcvd")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=8, help="latent samples per record")
    p.add_argument("--gnuplot", action="store_true",
                   help="emit joint-distribution histogram data")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: all cores)")

    p = add("infer", cmd_infer, "predict configurations for one record")
    hand_args(p)
    seed_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".gcvd with input clouds")
    p.add_argument("--index", type=int, default=0, help="record index")
    p.add_argument("--samples", type=int, default=1,
                   help="latent samples (sample 0 is the prior mean)")

    return parser


def _dry_run_check(args) -> int:
    for key in ("hand", "annotations", "input", "csv", "checkpoint", "data",
                "train_data", "test_data", "collision_policy", "config_file"):
        path = getattr(args, key, None)
        if path and not os.path.exists(path):
            raise CliError(f"input file not found: {path}")
    print("dry run ok")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", None) is None and hasattr(args, "jobs"):
        args.jobs = os.cpu_count() or 1
    try:
        if args.dry_run:
            return _dry_run_check(args)
        if args.func is cmd_train:
            return cmd_train(args, argv if argv is not None else sys.argv[1:])
        return args.func(args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
