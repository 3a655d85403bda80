"""Scikit-learn style estimator facade over the CVAE pipeline.

Lets the model compose with the wider ecosystem: X is an array of point
clouds with shape (n_samples, n_points, 3), y the normalized joint targets
with shape (n_samples, n_joints). Hyperparameters mirror CvaeConfig.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cvae import CvaeConfig, dataset_arrays, infer, infer_batch, train_arrays


def check_clouds(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"X must have shape (n_samples, n_points, 3), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("X must contain at least one cloud with at least one point")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


def check_targets(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 2 or y.shape[0] != n_samples:
        raise ValueError(f"y must have shape ({n_samples}, n_joints), got {y.shape}")
    if not np.isfinite(y).all():
        raise ValueError("y contains non-finite values")
    if y.min() < -1e-6 or y.max() > 1 + 1e-6:
        raise ValueError("y must be normalized joint values in [0, 1]")
    return y


class CvaeJointRegressor(BaseEstimator):
    """Predicts normalized joint configurations from raw point clouds (mm).

    `fit(X, y)` trains the conditional VAE; `predict(X)` decodes the prior
    mean (deterministic); `sample(X, n_samples)` decodes additional draws
    from the prior for best-of-K style use.
    """

    def __init__(self, latent_dim=16, epochs=300, batch_size=64, lr=1e-4,
                 beta_min=1e-4, beta_max=1.0, beta_ramp=(50, 100),
                 beta_center=75.0, beta_steepness=0.28, seed=0, scale=None):
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.beta_ramp = beta_ramp
        self.beta_center = beta_center
        self.beta_steepness = beta_steepness
        self.seed = seed
        self.scale = scale

    def _config(self) -> CvaeConfig:
        return CvaeConfig(latent_dim=self.latent_dim, epochs=self.epochs,
                          batch_size=self.batch_size, lr=self.lr,
                          beta_min=self.beta_min, beta_max=self.beta_max,
                          beta_ramp=tuple(self.beta_ramp),
                          beta_center=self.beta_center,
                          beta_steepness=self.beta_steepness, seed=self.seed)

    def fit(self, X, y, eval_set=None):
        X = check_clouds(X)
        y = check_targets(y, len(X))
        self.scale_ = float(self.scale) if self.scale is not None else \
            max(float(np.abs(X).max()), 1.0)
        Xs = X / np.float32(self.scale_)
        if eval_set is not None:
            Xe = check_clouds(eval_set[0]) / np.float32(self.scale_)
            ye = check_targets(eval_set[1], len(Xe))
        else:
            Xe, ye = Xs, y
        result = train_arrays(Xs, y, Xe, ye, self._config())
        self.params_ = result.params
        self.history_ = result.history
        self.n_joints_ = y.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_clouds(X) / np.float32(self.scale_)
        zs = np.zeros((len(X), self.latent_dim), dtype=np.float32)
        return infer_batch(self.params_, X, zs)

    def sample(self, X, n_samples: int = 8, seed: int = 0) -> np.ndarray:
        """Per-input predictions of shape (n_inputs, n_samples, n_joints);
        sample 0 is the deterministic prior-mean decode."""
        self._check_fitted()
        X = check_clouds(X) / np.float32(self.scale_)
        return np.stack([infer(self.params_, x, self.latent_dim, n_samples,
                               seed + i) for i, x in enumerate(X)])

    def score(self, X, y) -> float:
        """Negative mean per-sample RMSE (higher is better)."""
        pred = self.predict(X)
        y = check_targets(y, len(pred))
        rmse = np.sqrt(((pred - y) ** 2).mean(axis=1))
        return -float(rmse.mean())
