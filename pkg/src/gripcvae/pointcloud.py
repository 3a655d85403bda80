"""Surface point-cloud synthesis: the fully-dense, cluster and handprint variants.

A template is sampled once per (model, spec, seed) in link-local frames;
building a cloud for a configuration only applies forward kinematics to the
template, so per-variant masks never depend on the configuration.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .hand import HandModel, JointConfig, forward_kinematics
from .seeds import rng_for

NORMAL_TOL = 1e-6


class PointCloudError(ValueError):
    pass


class Variant(enum.Enum):
    FULLY_DENSE = "dense"
    CLUSTER = "cluster"
    HANDPRINT = "handprint"

    @classmethod
    def from_name(cls, name: str) -> "Variant":
        for v in cls:
            if v.value == name:
                return v
        raise ValueError(f"unknown variant {name!r}; expected one of "
                         f"{[v.value for v in cls]}")


@dataclass(frozen=True)
class SamplingSpec:
    variant: Variant = Variant.FULLY_DENSE
    total_points: int = 512
    cluster_radius_fraction: float = 0.5
    handprint_dot_threshold: float = 0.0
    seed: int = 0
    farthest_point: bool = False  # blue-noise-ish post-pass per link

    def __post_init__(self):
        if not 0.0 < self.cluster_radius_fraction <= 1.0:
            raise ValueError(f"cluster_radius_fraction must be in (0, 1], "
                             f"got {self.cluster_radius_fraction}")
        if self.total_points < 1:
            raise ValueError("total_points must be >= 1")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3) world frame, mm
    normals: np.ndarray  # (n, 3) unit
    link_ids: np.ndarray  # (n,) source link index
    variant: Variant

    def __post_init__(self):
        p, nrm, ids = (np.asarray(self.points), np.asarray(self.normals),
                       np.asarray(self.link_ids))
        if len(p) == 0:
            raise PointCloudError("point cloud is empty")
        if p.shape != nrm.shape or p.shape != (len(ids), 3):
            raise PointCloudError(f"inconsistent shapes: points {p.shape}, "
                                  f"normals {nrm.shape}, link_ids {ids.shape}")
        lengths = np.linalg.norm(nrm, axis=1)
        worst = np.abs(lengths - 1.0).max()
        if worst > NORMAL_TOL:
            raise PointCloudError(f"normals not unit length (worst error {worst:.3g})")

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SurfaceTemplate:
    """Link-local sample set plus the variant's retained-index mask."""

    variant: Variant
    points: np.ndarray  # (n, 3) link-local
    normals: np.ndarray  # (n, 3) link-local
    link_ids: np.ndarray  # (n,)
    keep: np.ndarray  # indices into the arrays above

    @property
    def n_kept(self) -> int:
        return len(self.keep)


def allocate_points(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation proportional to area, at least 1 each."""
    areas = np.asarray(areas, dtype=np.float64)
    if total < len(areas):
        raise ValueError(f"cannot allocate {total} points to {len(areas)} links")
    quotas = total * areas / areas.sum()
    counts = np.floor(quotas).astype(np.int64)
    frac = quotas - counts
    order = np.argsort(-frac, kind="stable")  # ties broken toward lower index
    counts[order[: total - counts.sum()]] += 1
    while (counts == 0).any():
        counts[int(np.argmax(counts == 0))] += 1
        counts[int(np.argmax(counts))] -= 1
    return counts


def link_radius(link) -> float:
    """Radius used for cluster spheres: the thinnest cross-section."""
    return link.geometry.min_radius()


def _farthest_point_select(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy farthest-point indices, seeded at index 0 for determinism."""
    chosen = [0]
    d = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < m:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


_FPS_OVERSAMPLE = 4
_CLUSTER_BATCH = 2048
_CLUSTER_MAX_BATCHES = 10_000


def _sample_link(link, count: int, rng, spec: SamplingSpec):
    """Sample one link: uniform on the full surface, or uniform on the
    cluster region for the cluster variant (whole-surface rejection)."""
    if spec.variant is not Variant.CLUSTER:
        if spec.farthest_point and count > 1:
            pts, nrm = link.geometry.sample_surface(_FPS_OVERSAMPLE * count, rng)
            idx = _farthest_point_select(pts, count)
            return pts[idx], nrm[idx]
        return link.geometry.sample_surface(count, rng)

    radius = spec.cluster_radius_fraction * link_radius(link)
    kept_p, kept_n = [], []
    have = 0
    for _ in range(_CLUSTER_MAX_BATCHES):
        pts, nrm = link.geometry.sample_surface(_CLUSTER_BATCH, rng)
        inside = np.linalg.norm(pts - link.inner_point, axis=1) <= radius
        kept_p.append(pts[inside])
        kept_n.append(nrm[inside])
        have += int(inside.sum())
        if have >= max(count, _FPS_OVERSAMPLE * count if spec.farthest_point else count):
            break
    if have < count:
        raise PointCloudError(
            f"cluster region of link {link.name!r} captured {have} of {count} "
            f"points (radius {radius:.3g} mm too small)")
    pts = np.concatenate(kept_p)
    nrm = np.concatenate(kept_n)
    if spec.farthest_point and count > 1:
        idx = _farthest_point_select(pts, count)
        return pts[idx], nrm[idx]
    return pts[:count], nrm[:count]


def sample_link_surfaces(model: HandModel, spec: SamplingSpec) -> SurfaceTemplate:
    """Build the link-local template for a variant. Deterministic per seed:
    each link consumes its own substream, so allocations elsewhere never
    shift a link's draws."""
    areas = np.array([link.surface_area for link in model.links])
    if (areas <= 0).any():
        bad = model.links[int(np.argmin(areas))].name
        raise PointCloudError(f"link {bad!r} has zero surface area")
    counts = allocate_points(areas, spec.total_points)
    pts, nrms, ids = [], [], []
    for i, (link, count) in enumerate(zip(model.links, counts)):
        rng = rng_for(spec.seed, i)
        p, n = _sample_link(link, int(count), rng, spec)
        pts.append(p)
        nrms.append(n)
        ids.append(np.full(int(count), i, dtype=np.int64))
    points = np.concatenate(pts)
    normals = np.concatenate(nrms)
    link_ids = np.concatenate(ids)
    keep = np.arange(len(points))
    if spec.variant is Variant.HANDPRINT:
        keep = _handprint_mask(model, spec, points, normals, link_ids)
    return SurfaceTemplate(spec.variant, points, normals, link_ids, keep)


def _handprint_mask(model, spec, points, normals, link_ids) -> np.ndarray:
    """Indices of template points whose world normal at the nominal
    configuration faces the palm normal (dot strictly above threshold).

    Unit-vector dots never go below -1, so a threshold at or below -1 is
    vacuous and keeps everything, including exact antipodes.
    """
    if spec.handprint_dot_threshold <= -1.0:
        return np.arange(len(points))
    nominal = forward_kinematics(model, model.nominal_config())
    palm_n = nominal[model.palm_link_id].rotate(model.palm_normal)
    dots = np.empty(len(points))
    for i in range(model.n_links):
        m = link_ids == i
        if m.any():
            dots[m] = nominal[i].rotate(normals[m]) @ palm_n
    keep = np.nonzero(dots > spec.handprint_dot_threshold)[0]
    if len(keep) == 0:
        raise PointCloudError(
            f"handprint mask is empty at threshold {spec.handprint_dot_threshold}")
    return keep


def _transform_template(model: HandModel, q: JointConfig,
                        template: SurfaceTemplate) -> PointCloud:
    transforms = forward_kinematics(model, q)
    idx = template.keep
    pts = template.points[idx]
    nrm = template.normals[idx]
    ids = template.link_ids[idx]
    out_p = np.empty_like(pts)
    out_n = np.empty_like(nrm)
    for i in range(model.n_links):
        m = ids == i
        if m.any():
            out_p[m] = transforms[i].apply(pts[m])
            out_n[m] = transforms[i].rotate(nrm[m])
    return PointCloud(out_p, out_n, ids, template.variant)


def _require_variant(template: SurfaceTemplate, variant: Variant):
    if template.variant is not variant:
        raise PointCloudError(f"template was sampled for variant "
                              f"{template.variant.value!r}, not {variant.value!r}")


def build_fully_dense(model: HandModel, q: JointConfig,
                      template: SurfaceTemplate) -> PointCloud:
    _require_variant(template, Variant.FULLY_DENSE)
    return _transform_template(model, q, template)


def build_cluster(model: HandModel, q: JointConfig,
                  template: SurfaceTemplate) -> PointCloud:
    _require_variant(template, Variant.CLUSTER)
    kept_ids = template.link_ids[template.keep]
    for i, link in enumerate(model.links):
        if not (kept_ids == i).any():
            raise PointCloudError(f"cluster of link {link.name!r} is empty "
                                  f"(radius too small)")
    return _transform_template(model, q, template)


def build_handprint(model: HandModel, q: JointConfig,
                    template: SurfaceTemplate) -> PointCloud:
    _require_variant(template, Variant.HANDPRINT)
    if template.n_kept == 0:
        raise PointCloudError("handprint mask is empty")
    return _transform_template(model, q, template)


_BUILDERS = {
    Variant.FULLY_DENSE: build_fully_dense,
    Variant.CLUSTER: build_cluster,
    Variant.HANDPRINT: build_handprint,
}


def build_cloud(model: HandModel, q: JointConfig,
                template: SurfaceTemplate) -> PointCloud:
    return _BUILDERS[template.variant](model, q, template)
