"""Primitive link geometries: box, capsule, cylinder, sphere (dimensions in mm).

Each primitive is centered at the origin of its own frame; capsules and
cylinders have their length axis along +z (URDF convention). `length` is
the cylindrical segment only, caps excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Box:
    size: tuple  # full extents (x, y, z)

    kind = "box"

    def __post_init__(self):
        if min(self.size) <= 0:
            raise GeometryError(f"box size must be positive, got {self.size}")

    @property
    def half_extents(self) -> np.ndarray:
        return np.asarray(self.size, dtype=np.float64) / 2.0

    def surface_area(self) -> float:
        a, b, c = self.size
        return 2.0 * (a * b + b * c + c * a)

    def aabb(self) -> tuple:
        h = self.half_extents
        return -h, h

    def min_radius(self) -> float:
        """Half of the smallest extent (radius of the thinnest cross-section)."""
        return float(min(self.size)) / 2.0

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents))

    def sample_surface(self, n: int, rng: np.random.Generator):
        h = self.half_extents
        # Face order: +x, -x, +y, -y, +z, -z
        areas = np.array(
            [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]]
        )
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 2))
        points = np.empty((n, 3))
        normals = np.zeros((n, 3))
        for f in range(6):
            m = faces == f
            axis, sign = divmod(f, 2)
            sign = 1.0 if sign == 0 else -1.0
            other = [i for i in range(3) if i != axis]
            points[m, axis] = sign * h[axis]
            points[m, other[0]] = u[m, 0] * h[other[0]]
            points[m, other[1]] = u[m, 1] * h[other[1]]
            normals[m, axis] = sign
        return points, normals

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        d = np.where(outside > 0, outside, np.min(self.half_extents - np.abs(p), axis=1))
        return d if d.size > 1 else float(d[0])


@dataclass(frozen=True)
class Sphere:
    radius: float

    kind = "sphere"

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError(f"sphere radius must be positive, got {self.radius}")

    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def aabb(self) -> tuple:
        r = np.full(3, self.radius)
        return -r, r

    def min_radius(self) -> float:
        return float(self.radius)

    def bounding_radius(self) -> float:
        return float(self.radius)

    def sample_surface(self, n: int, rng: np.random.Generator):
        z = rng.uniform(-1.0, 1.0, size=n)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        s = np.sqrt(1.0 - z**2)
        normals = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
        return self.radius * normals, normals

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d = np.abs(np.linalg.norm(p, axis=1) - self.radius)
        return d if d.size > 1 else float(d[0])


@dataclass(frozen=True)
class Cylinder:
    radius: float
    length: float

    kind = "cylinder"

    def __post_init__(self):
        if self.radius <= 0 or self.length <= 0:
            raise GeometryError(f"cylinder dimensions must be positive, got {self}")

    def surface_area(self) -> float:
        return 2.0 * np.pi * self.radius * self.length + 2.0 * np.pi * self.radius**2

    def aabb(self) -> tuple:
        r, h = self.radius, self.length / 2.0
        return np.array([-r, -r, -h]), np.array([r, r, h])

    def min_radius(self) -> float:
        return float(self.radius)

    def bounding_radius(self) -> float:
        return float(np.hypot(self.radius, self.length / 2.0))

    def sample_surface(self, n: int, rng: np.random.Generator):
        r, l = self.radius, self.length
        lateral = 2.0 * np.pi * r * l
        cap = np.pi * r**2
        comp = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        points = np.empty((n, 3))
        normals = np.zeros((n, 3))
        m = comp == 0
        z = rng.uniform(-l / 2.0, l / 2.0, size=n)
        points[m] = np.stack([r * np.cos(phi[m]), r * np.sin(phi[m]), z[m]], axis=1)
        normals[m] = np.stack([np.cos(phi[m]), np.sin(phi[m]), np.zeros(m.sum())], axis=1)
        rho = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        for c, sign in ((1, 1.0), (2, -1.0)):
            m = comp == c
            points[m] = np.stack(
                [rho[m] * np.cos(phi[m]), rho[m] * np.sin(phi[m]), np.full(m.sum(), sign * l / 2.0)],
                axis=1,
            )
            normals[m, 2] = sign
        return points, normals

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        rho = np.hypot(p[:, 0], p[:, 1])
        dr = rho - self.radius
        dz = np.abs(p[:, 2]) - self.length / 2.0
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(-dr, -dz)
        d = np.where((dr > 0) | (dz > 0), outside, inside)
        return d if d.size > 1 else float(d[0])


@dataclass(frozen=True)
class Capsule:
    radius: float
    length: float  # cylindrical segment, caps excluded

    kind = "capsule"

    def __post_init__(self):
        if self.radius <= 0 or self.length <= 0:
            raise GeometryError(f"capsule dimensions must be positive, got {self}")

    def surface_area(self) -> float:
        return 2.0 * np.pi * self.radius * self.length + 4.0 * np.pi * self.radius**2

    def aabb(self) -> tuple:
        r, h = self.radius, self.length / 2.0 + self.radius
        return np.array([-r, -r, -h]), np.array([r, r, h])

    def min_radius(self) -> float:
        return float(self.radius)

    def bounding_radius(self) -> float:
        return float(self.length / 2.0 + self.radius)

    def sample_surface(self, n: int, rng: np.random.Generator):
        r, l = self.radius, self.length
        lateral = 2.0 * np.pi * r * l
        caps = 4.0 * np.pi * r**2  # two hemispheres = full sphere area
        comp = rng.choice(2, size=n, p=np.array([lateral, caps]) / (lateral + caps))
        points = np.empty((n, 3))
        normals = np.empty((n, 3))
        m = comp == 0
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-l / 2.0, l / 2.0, size=n)
        points[m] = np.stack([r * np.cos(phi[m]), r * np.sin(phi[m]), z[m]], axis=1)
        normals[m] = np.stack([np.cos(phi[m]), np.sin(phi[m]), np.zeros(m.sum())], axis=1)
        # Caps: uniform on the full sphere, shifted to the matching end.
        m = comp == 1
        zc = rng.uniform(-1.0, 1.0, size=n)
        s = np.sqrt(1.0 - zc**2)
        dirs = np.stack([s * np.cos(phi), s * np.sin(phi), zc], axis=1)
        ends = np.where(zc >= 0, l / 2.0, -l / 2.0)
        points[m] = r * dirs[m] + np.stack(
            [np.zeros(m.sum()), np.zeros(m.sum()), ends[m]], axis=1
        )
        normals[m] = dirs[m]
        return points, normals

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        zc = np.clip(p[:, 2], -self.length / 2.0, self.length / 2.0)
        axis_dist = np.linalg.norm(p - np.stack([np.zeros(len(p)), np.zeros(len(p)), zc], axis=1), axis=1)
        d = np.abs(axis_dist - self.radius)
        return d if d.size > 1 else float(d[0])


PRIMITIVES = {"box": Box, "sphere": Sphere, "cylinder": Cylinder, "capsule": Capsule}
