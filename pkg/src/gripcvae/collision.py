"""Self-collision scoring over link keypoints.

The score is a sum of hinge penalties over all ordered link pairs: a pair
contributes when its keypoints sit closer than a distance threshold. A
configuration is valid when the score is exactly zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hand import HandModel, JointConfig, link_keypoints


@dataclass(frozen=True)
class CollisionPolicy:
    delta: np.ndarray  # (L, L) distance thresholds, mm
    mu: np.ndarray  # (L, L) pair weights

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        if delta.shape != mu.shape or delta.ndim != 2 or delta.shape[0] != delta.shape[1]:
            raise ValueError(f"delta/mu must be square and same shape, "
                             f"got {delta.shape} and {mu.shape}")
        if not np.allclose(delta, delta.T):
            raise ValueError("delta must be symmetric")
        if not np.allclose(mu, mu.T):
            raise ValueError("mu must be symmetric")
        if (delta < 0).any():
            raise ValueError("delta must be non-negative")
        if np.diag(mu).any():
            raise ValueError("mu diagonal must be zero")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "mu", mu)

    @property
    def n_links(self) -> int:
        return self.delta.shape[0]


def default_policy(model: HandModel) -> CollisionPolicy:
    """Thresholds delta_ij = r_i + r_j from each link's thinnest cross-section;
    weights 1 except the diagonal and kinematically adjacent pairs."""
    radii = np.array([link.geometry.min_radius() for link in model.links])
    delta = radii[:, None] + radii[None, :]
    mu = np.ones((model.n_links, model.n_links))
    np.fill_diagonal(mu, 0.0)
    np.fill_diagonal(delta, 0.0)
    for a, b in model.adjacent_link_pairs():
        mu[a, b] = mu[b, a] = 0.0
    return CollisionPolicy(delta, mu)


def self_collision_score(keypoints: np.ndarray, policy: CollisionPolicy) -> float:
    """Full double sum of mu_ij * max(delta_ij - |k_i - k_j|, 0); each
    unordered pair contributes twice under a symmetric mu."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape != (policy.n_links, 3):
        raise ValueError(f"expected {policy.n_links} keypoints, got shape {kp.shape}")
    diff = kp[:, None, :] - kp[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    return float(np.sum(policy.mu * np.maximum(policy.delta - dist, 0.0)))


def is_valid(model: HandModel, q: JointConfig, policy: CollisionPolicy) -> bool:
    return self_collision_score(link_keypoints(model, q), policy) == 0.0


# ---------------------------------------------------------------------------
# JSON override (--collision-policy)
# ---------------------------------------------------------------------------

def policy_to_json(model: HandModel, policy: CollisionPolicy) -> str:
    return json.dumps({
        "links": [link.name for link in model.links],
        "delta": policy.delta.tolist(),
        "mu": policy.mu.tolist(),
    }, indent=2)


def policy_from_json(text: str, model: HandModel) -> CollisionPolicy:
    data = json.loads(text)
    names = [link.name for link in model.links]
    if data.get("links") != names:
        raise ValueError(f"policy link order {data.get('links')} does not match "
                         f"the model's {names}")
    return CollisionPolicy(np.asarray(data["delta"]), np.asarray(data["mu"]))
