"""Conditional VAE mapping gripper point clouds to joint configurations.

Encoder: shared per-point MLP + symmetric max-pool (PointNet-style) over the
cloud, a small MLP over the normalized joint vector, then a latent head
producing (mu, logvar). Decoder: per-point MLP, latent vector concatenated
to every per-point feature, shared MLP, max-pool, and a linear head squashed
onto [0, 1]. The prior is a standard normal, so inference needs no encoder.

Input point coordinates are divided by a per-hand scale (see
`workspace_scale`) so the network sees O(1) values for any hand size.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward
from .dataset import Dataset
from .hand import HandModel
from .seeds import rng_for

F32 = np.float32


class CvaeError(ValueError):
    pass


@dataclass(frozen=True)
class CvaeConfig:
    latent_dim: int = 16
    point_mlp_dims: tuple = (3, 64, 128, 256)  # shared per-point encoder
    joint_mlp_hidden: tuple = (64, 128)  # joint-vector encoder widths
    latent_mlp_hidden: tuple = (128,)  # between concat and (mu, logvar)
    decoder_point_mlp_dims: tuple = (3, 64, 128)  # per-point decoder
    decoder_head_hidden: tuple = (256, 128)  # after z-concat; pool before last->N
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    beta_min: float = 1e-4
    beta_max: float = 1.0
    beta_ramp: tuple = (50, 100)
    beta_center: float = 75.0
    beta_steepness: float = 0.28
    seed: int = 0

    def layer_dims(self, n_joints: int) -> dict:
        """Resolved (in, out) dims of every linear layer for an N-joint hand."""
        point_feat = self.point_mlp_dims[-1]
        joint_dims = (n_joints,) + self.joint_mlp_hidden
        latent_dims = ((point_feat + joint_dims[-1],) + self.latent_mlp_hidden
                       + (2 * self.latent_dim,))
        head_dims = ((self.decoder_point_mlp_dims[-1] + self.latent_dim,)
                     + self.decoder_head_hidden + (n_joints,))
        return {
            "enc.point": _pairs(self.point_mlp_dims),
            "enc.joint": _pairs(joint_dims),
            "enc.latent": _pairs(latent_dims),
            "dec.point": _pairs(self.decoder_point_mlp_dims),
            "dec.head": _pairs(head_dims),
        }


def _pairs(dims):
    return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class LatentStats:
    mu: np.ndarray
    logvar: np.ndarray


def init_params(config: CvaeConfig, n_joints: int, seed: int | None = None) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, seeded and ordered."""
    rng = rng_for(config.seed if seed is None else seed, 0xA11)
    params = {}
    for group, pairs in config.layer_dims(n_joints).items():
        for i, (fan_in, fan_out) in enumerate(pairs):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{group}.w{i}"] = Tensor(
                rng.uniform(-bound, bound, (fan_in, fan_out)).astype(F32),
                requires_grad=True)
            params[f"{group}.b{i}"] = Tensor(
                rng.uniform(-bound, bound, fan_out).astype(F32),
                requires_grad=True)
    return params


def _mlp(params: dict, group: str, x: Tensor, n_layers: int,
         relu_last: bool) -> Tensor:
    for i in range(n_layers):
        x = ad.dense(x, params[f"{group}.w{i}"], params[f"{group}.b{i}"],
                     relu_out=relu_last or i < n_layers - 1)
    return x


def _sigmoid(x: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.tanh(ad.mul(x, 0.5)), 0.5), 0.5)


def _n_layers(params, group) -> int:
    return sum(1 for k in params if k.startswith(f"{group}.w"))


def encode_batch(params: dict, clouds: Tensor, qs: Tensor) -> tuple:
    """(mu, logvar) for clouds (B, n, 3) and configs (B, N), both Tensors."""
    B, n, _ = clouds.shape
    if n == 0:
        raise CvaeError("cannot encode an empty point cloud")
    flat = ad.reshape(clouds, (B * n, 3))
    pf = _mlp(params, "enc.point", flat, _n_layers(params, "enc.point"), relu_last=True)
    pf = ad.reshape(pf, (B, n, pf.shape[-1]))
    global_feat = ad.max_over_points(pf, axis=1)  # (B, point_feat)
    jf = _mlp(params, "enc.joint", qs, _n_layers(params, "enc.joint"), relu_last=True)
    both = ad.concat([global_feat, jf], axis=1)
    out = _mlp(params, "enc.latent", both, _n_layers(params, "enc.latent"),
               relu_last=False)
    L = out.shape[1] // 2
    return _slice_cols(out, 0, L), _slice_cols(out, L, 2 * L)


def _slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice as a graph node."""
    out = Tensor(x.data[:, lo:hi], requires_grad=x.requires_grad,
                 _parents=(x,), op="slice")

    def bw(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, lo:hi] = g
            x.accumulate(buf)

    out._backward = bw
    return out


def _slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Row slice as a graph node (contiguous view of a weight matrix)."""
    out = Tensor(x.data[lo:hi], requires_grad=x.requires_grad,
                 _parents=(x,), op="slice")

    def bw(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[lo:hi] = g
            x.accumulate(buf)

    out._backward = bw
    return out


def decode_batch(params: dict, clouds: Tensor, zs: Tensor) -> Tensor:
    """Normalized joint predictions (B, N) in [0, 1].

    The first head layer acts on the per-point features concatenated with
    the latent vector; it is computed as two gemms (per-point block plus a
    per-sample latent block broadcast over points), which is algebraically
    identical to concatenating first.
    """
    B, n, _ = clouds.shape
    if n == 0:
        raise CvaeError("cannot decode an empty point cloud")
    if zs.shape[0] != B:
        raise CvaeError(f"z batch {zs.shape[0]} != cloud batch {B}")
    flat = ad.reshape(clouds, (B * n, 3))
    pf = _mlp(params, "dec.point", flat, _n_layers(params, "dec.point"), relu_last=True)
    F = pf.shape[-1]
    L = zs.shape[1]
    w0 = params["dec.head.w0"]
    zpart = ad.reshape(ad.matmul(zs, _slice_rows(w0, F, F + L)), (B, 1, w0.shape[1]))
    h = ad.dense(pf, _slice_rows(w0, 0, F), params["dec.head.b0"],
                 extra=zpart, relu_out=True, n_points=n)
    n_head = _n_layers(params, "dec.head")
    for i in range(1, n_head - 1):
        h = ad.dense(h, params[f"dec.head.w{i}"], params[f"dec.head.b{i}"],
                     relu_out=True)
    h = ad.reshape(h, (B, n, h.shape[-1]))
    pooled = ad.max_over_points(h, axis=1)
    i = n_head - 1
    out = ad.dense(pooled, params[f"dec.head.w{i}"], params[f"dec.head.b{i}"])
    return _sigmoid(out)


def encode(params: dict, cloud_points: np.ndarray, q_normalized: np.ndarray) -> LatentStats:
    """Single-record wrapper; cloud_points already divided by the hand scale."""
    clouds = Tensor(np.asarray(cloud_points, dtype=F32)[None])
    qs = Tensor(np.asarray(q_normalized, dtype=F32)[None])
    mu, logvar = encode_batch(params, clouds, qs)
    return LatentStats(mu.data[0].copy(), logvar.data[0].copy())


def decode(params: dict, cloud_points: np.ndarray, z: np.ndarray) -> np.ndarray:
    clouds = Tensor(np.asarray(cloud_points, dtype=F32)[None])
    zs = Tensor(np.asarray(z, dtype=F32)[None])
    return decode_batch(params, clouds, zs).data[0].copy()


def recon_error(qs: Tensor, qhat: Tensor) -> Tensor:
    """Batch mean of per-sample root-mean-square joint error."""
    per_sample = ad.sqrt(ad.mean(ad.square(ad.sub(qs, qhat)), axis=1))
    return ad.mean(per_sample)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of the closed-form divergence of a diagonal Gaussian from
    the standard normal: 0.5 * sum_d(mu^2 + exp(logvar) - logvar - 1)."""
    terms = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), logvar), 1.0)
    return ad.mul(ad.mean(terms), 0.5 * mu.shape[-1])


def loss_terms(params: dict, clouds: Tensor, qs: Tensor, noise: np.ndarray,
               beta: float) -> tuple:
    """(total, recon, kl) graph nodes for one batch."""
    mu, logvar = encode_batch(params, clouds, qs)
    z = ad.gaussian_sample(mu, logvar, noise)
    qhat = decode_batch(params, clouds, z)
    recon = recon_error(qs, qhat)
    kl = kl_divergence(mu, logvar)
    total = ad.add(recon, ad.mul(kl, float(beta)))
    for name, node in (("total", total), ("recon", recon), ("kl", kl)):
        if not np.isfinite(node.data).all():
            raise CvaeError(f"non-finite loss term {name!r}")
    return total, recon, kl


def beta_schedule(epoch: int, config: CvaeConfig = CvaeConfig()) -> float:
    """Constant-sigmoid-constant annealing of the divergence weight."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lo, hi = config.beta_ramp
    if epoch < lo:
        return config.beta_min
    if epoch >= hi:
        return config.beta_max
    t = 1.0 / (1.0 + np.exp(-config.beta_steepness * (epoch - config.beta_center)))
    return float(config.beta_min + (config.beta_max - config.beta_min) * t)


# ---------------------------------------------------------------------------
# Hand scale
# ---------------------------------------------------------------------------

_CORNER_CAP = 16


def workspace_scale(model: HandModel) -> float:
    """Upper bound on any surface point's distance from the origin (mm),
    from a joint-limit corner sweep per link plus its bounding radius."""
    from .hand import forward_kinematics

    best = 1.0
    for lid, link in enumerate(model.links):
        ancestors = model.ancestor_joints(lid)
        bound = link.geometry.bounding_radius()
        if len(ancestors) > _CORNER_CAP:
            ancestors = ancestors[-_CORNER_CAP:]
        for corner in itertools.product((0, 1), repeat=len(ancestors)):
            normalized = np.full(model.n_joints, 0.5)
            for j, bit in zip(ancestors, corner):
                normalized[j] = float(bit)
            t = forward_kinematics(model, model.config(normalized))[lid]
            best = max(best, float(np.linalg.norm(t.translation)) + bound)
    return best


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    best_params: dict
    history: list  # dict rows: epoch, beta, train_recon, train_kl, test_recon, wall_ms
    best_epoch: int
    adam_step: int


def dataset_arrays(ds: Dataset, scale: float) -> tuple:
    """(clouds (M, n, 3) float32 scaled, configs (M, N) float32)."""
    n = ds.header.points_per_record
    if n == 0:
        raise CvaeError("training needs a fixed per-record point count")
    X = np.stack([r.cloud.points for r in ds.records]).astype(F32) / F32(scale)
    Y = np.stack([r.normalized for r in ds.records]).astype(F32)
    return X, Y


def check_compatible(a, b, what="datasets"):
    for field_name in ("variant", "n_joints", "hand_name"):
        va, vb = getattr(a, field_name), getattr(b, field_name)
        if va != vb:
            raise CvaeError(f"{what} disagree on {field_name}: {va!r} vs {vb!r}")


def train_arrays(X_train, Y_train, X_test, Y_test, config: CvaeConfig,
                 log_cb=None) -> TrainResult:
    n_joints = Y_train.shape[1]
    params = init_params(config, n_joints)
    plist = [params[k] for k in sorted(params)]
    opt = Adam(plist, lr=config.lr)
    best = (np.inf, None, -1)
    history = []
    m = len(X_train)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = beta_schedule(epoch, config)
        order = rng_for(config.seed, 2, epoch).permutation(m)
        recon_sum = kl_sum = 0.0
        batches = 0
        for bi, lo in enumerate(range(0, m, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            clouds = Tensor(X_train[idx])
            qs = Tensor(Y_train[idx])
            noise = rng_for(config.seed, 3, epoch, bi).standard_normal(
                (len(idx), config.latent_dim)).astype(F32)
            total, recon, kl = loss_terms(params, clouds, qs, noise, beta)
            opt.zero_grad()
            try:
                backward(total, params=plist)
            except Exception as e:
                raise CvaeError(f"backward failed at epoch {epoch}, batch {bi}: {e}")
            opt.step()
            recon_sum += recon.item()
            kl_sum += kl.item()
            batches += 1
        test_recon = evaluate_recon(params, X_test, Y_test, config.batch_size)
        row = {
            "epoch": epoch,
            "beta": beta,
            "train_recon": recon_sum / batches,
            "train_kl": kl_sum / batches,
            "test_recon": test_recon,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        history.append(row)
        if log_cb:
            log_cb(row)
        if test_recon < best[0]:
            best = (test_recon, {k: Tensor(v.data.copy(), requires_grad=True)
                                 for k, v in params.items()}, epoch)
    return TrainResult(params, best[1] or params, history, best[2], opt.step_count)


def evaluate_recon(params: dict, X, Y, batch_size: int) -> float:
    """Noise-free reconstruction error: z = mu, batch mean of per-sample RMSE."""
    total, count = 0.0, 0
    for lo in range(0, len(X), batch_size):
        clouds = Tensor(X[lo:lo + batch_size])
        qs = Tensor(Y[lo:lo + batch_size])
        mu, _ = encode_batch(params, clouds, qs)
        qhat = decode_batch(params, clouds, mu)
        err = ((qs.data - qhat.data) ** 2).mean(axis=1) ** 0.5
        total += float(err.sum())
        count += len(err)
    return total / count


def train(train_ds: Dataset, test_ds: Dataset, config: CvaeConfig,
          model: HandModel, out_dir, log_cb=None) -> dict:
    """Full training entry point: writes per-epoch CSV plus best/final
    checkpoints under out_dir; returns their paths and the history."""
    import os

    check_compatible(train_ds.header, test_ds.header)
    if model.name != train_ds.header.hand_name:
        raise CvaeError(f"hand model {model.name!r} does not match dataset "
                        f"hand {train_ds.header.hand_name!r}")
    scale = workspace_scale(model)
    X_train, Y_train = dataset_arrays(train_ds, scale)
    X_test, Y_test = dataset_arrays(test_ds, scale)
    result = train_arrays(X_train, Y_train, X_test, Y_test, config, log_cb=log_cb)

    os.makedirs(out_dir, exist_ok=True)
    meta = checkpoint_meta(config, model, train_ds.header.variant.value, scale)
    paths = {
        "final": os.path.join(out_dir, "final.ckpt"),
        "best": os.path.join(out_dir, "best.ckpt"),
        "log": os.path.join(out_dir, "training_log.csv"),
    }
    ad.save_checkpoint(paths["final"], result.params, step=result.adam_step,
                       hyperparameters=meta)
    ad.save_checkpoint(paths["best"], result.best_params,
                       step=result.adam_step,
                       hyperparameters={**meta, "best_epoch": result.best_epoch})
    with open(paths["log"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "beta", "train_recon",
                                          "train_kl", "test_recon", "wall_ms"])
        w.writeheader()
        for row in result.history:
            w.writerow(row)
    return {"paths": paths, "result": result, "scale": scale}


def checkpoint_meta(config: CvaeConfig, model: HandModel, variant: str,
                    scale: float) -> dict:
    cfg = asdict(config)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    return {"hand_name": model.name, "variant": variant,
            "n_joints": model.n_joints, "scale_mm": scale, "config": cfg}


def config_from_meta(meta: dict) -> CvaeConfig:
    cfg = dict(meta["config"])
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    return CvaeConfig(**cfg)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer(params: dict, cloud_points_scaled: np.ndarray, latent_dim: int,
          num_samples: int = 1, seed: int = 0) -> np.ndarray:
    """(num_samples, N) normalized predictions. Sample 0 decodes the prior
    mean z = 0, so single-sample inference is deterministic; further samples
    draw z from the standard-normal prior."""
    clouds = np.asarray(cloud_points_scaled, dtype=F32)[None]
    zs = np.zeros((num_samples, latent_dim), dtype=F32)
    if num_samples > 1:
        zs[1:] = rng_for(seed, 4).standard_normal(
            (num_samples - 1, latent_dim)).astype(F32)
    tiled = Tensor(np.repeat(clouds, num_samples, axis=0))
    out = decode_batch(params, tiled, Tensor(zs))
    return out.data.copy()


def infer_batch(params: dict, clouds_scaled: np.ndarray,
                zs: np.ndarray) -> np.ndarray:
    """Decode a batch of clouds against a batch of latent vectors."""
    out = decode_batch(params, Tensor(np.asarray(clouds_scaled, dtype=F32)),
                       Tensor(np.asarray(zs, dtype=F32)))
    return out.data.copy()
