"""Hand description parsing and forward kinematics.

A hand is described by a strict URDF subset (see docs/hand-format.md) plus a
JSON sidecar carrying annotations URDF has no slot for: the palm link name,
the palm's outward grasping normal, and one inner-surface point per link.

Conventions:
  * all lengths in millimeters, all angles in radians;
  * joint origins are relative to the parent link frame (standard URDF);
  * each link's sampling frame is the frame of its collision primitive,
    and `forward_kinematics` returns world poses of those frames;
  * keypoints are the bounding-box centers of the primitives, recomputed
    from geometry at parse time.
"""

from __future__ import annotations

import io
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .geometry import PRIMITIVES, Box, Capsule, Cylinder, Sphere
from .transforms import RigidTransform, rotation_about_axis

INNER_POINT_TOL = 1e-6  # mm


class HandParseError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    name: str
    geometry: object
    local_transform: RigidTransform  # link frame -> collision-primitive frame
    inner_point: np.ndarray  # on the primitive surface, primitive frame (mm)
    keypoint: np.ndarray  # bounding-box center, primitive frame (mm)
    surface_area: float  # mm^2


@dataclass(frozen=True)
class Joint:
    name: str
    parent_link: int
    child_link: int
    origin: RigidTransform
    axis: np.ndarray  # unit
    limit_lo: float  # rad
    limit_hi: float


@dataclass(frozen=True)
class HandModel:
    name: str
    links: tuple
    joints: tuple
    palm_link_id: int
    palm_normal: np.ndarray  # unit, palm-link frame
    root_transform: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def limits_lo(self) -> np.ndarray:
        return np.array([j.limit_lo for j in self.joints])

    @property
    def limits_hi(self) -> np.ndarray:
        return np.array([j.limit_hi for j in self.joints])

    def link_index(self, name: str) -> int:
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(f"no link named {name!r}")

    def parent_joint_of(self, link_id: int):
        """Index of the joint whose child is link_id, or None for the palm."""
        for j, joint in enumerate(self.joints):
            if joint.child_link == link_id:
                return j
        return None

    def ancestor_joints(self, link_id: int) -> list:
        """Joint indices on the path palm -> link, proximal first."""
        chain = []
        while True:
            j = self.parent_joint_of(link_id)
            if j is None:
                return chain[::-1]
            chain.append(j)
            link_id = self.joints[j].parent_link

    def adjacent_link_pairs(self) -> set:
        return {(j.parent_link, j.child_link) for j in self.joints}

    def with_root(self, root: RigidTransform) -> "HandModel":
        return HandModel(self.name, self.links, self.joints, self.palm_link_id,
                         self.palm_normal, root)

    def config(self, normalized) -> "JointConfig":
        return JointConfig(np.asarray(normalized, dtype=np.float64),
                           self.limits_lo, self.limits_hi)

    def config_from_radians(self, radians) -> "JointConfig":
        return JointConfig.from_radians(np.asarray(radians, dtype=np.float64),
                                        self.limits_lo, self.limits_hi)

    def nominal_config(self) -> "JointConfig":
        """All joints at 0 radians (may sit outside the limits)."""
        return JointConfig.from_radians(np.zeros(self.n_joints),
                                        self.limits_lo, self.limits_hi, clip=False)


@dataclass(frozen=True)
class JointConfig:
    """Joint values stored normalized to [0, 1] against per-joint limits."""

    normalized: np.ndarray
    limits_lo: np.ndarray
    limits_hi: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normalized, dtype=np.float64)
        object.__setattr__(self, "normalized", n)
        if n.ndim != 1 or len(n) != len(self.limits_lo):
            raise ValueError(f"expected {len(self.limits_lo)} joint values, got shape {n.shape}")

    @property
    def radians(self) -> np.ndarray:
        return self.limits_lo + self.normalized * (self.limits_hi - self.limits_lo)

    @classmethod
    def from_radians(cls, radians, lo, hi, clip: bool = False) -> "JointConfig":
        span = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
        normalized = (np.asarray(radians, dtype=np.float64) - lo) / span
        if clip:
            normalized = np.clip(normalized, 0.0, 1.0)
        return cls(normalized, np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_SUPPORTED_GEOM = set(PRIMITIVES)


def _parse_floats(text: str, n: int, ctx: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise HandParseError(f"{ctx}: expected {n} numbers, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise HandParseError(f"{ctx}: non-numeric value in {text!r}") from None


def _parse_origin(elem, ctx: str) -> RigidTransform:
    if elem is None:
        return RigidTransform.identity()
    xyz = _parse_floats(elem.get("xyz", "0 0 0"), 3, ctx)
    rpy = _parse_floats(elem.get("rpy", "0 0 0"), 3, ctx)
    return RigidTransform.from_xyz_rpy(xyz, rpy)


def _parse_geometry(geom_elem, ctx: str):
    children = list(geom_elem)
    if len(children) != 1:
        raise HandParseError(f"{ctx}: <geometry> must contain exactly one primitive")
    g = children[0]
    if g.tag == "mesh":
        raise HandParseError(f"{ctx}: unsupported element <mesh> (primitive geometry only)")
    if g.tag not in _SUPPORTED_GEOM:
        raise HandParseError(f"{ctx}: unsupported element <{g.tag}>")
    if g.tag == "box":
        size = _parse_floats(g.get("size", ""), 3, ctx)
        return Box(tuple(size))
    if g.tag == "sphere":
        return Sphere(float(g.get("radius", "0")))
    cls = Cylinder if g.tag == "cylinder" else Capsule
    return cls(float(g.get("radius", "0")), float(g.get("length", "0")))


def parse_hand(urdf_text: str, annotations_text: str) -> HandModel:
    """Parse a URDF-subset hand plus its JSON sidecar into a validated model."""
    try:
        root = ET.fromstring(urdf_text)
    except ET.ParseError as e:
        raise HandParseError(f"URDF syntax error at line {e.position[0]}, "
                             f"column {e.position[1]}: {e.msg}") from None
    if root.tag != "robot":
        raise HandParseError(f"expected <robot> root element, got <{root.tag}>")
    name = root.get("name", "hand")

    try:
        ann = json.loads(annotations_text)
    except json.JSONDecodeError as e:
        raise HandParseError(f"annotation syntax error at line {e.lineno}, "
                             f"column {e.colno}: {e.msg}") from None
    for key in ("palm_link", "palm_normal", "inner_points"):
        if key not in ann:
            raise HandParseError(f"annotation file missing {key!r}")

    raw_links = []
    for le in root.findall("link"):
        lname = le.get("name")
        if lname is None:
            raise HandParseError("<link> without a name")
        coll = le.findall("collision")
        if len(coll) != 1:
            raise HandParseError(f"link {lname!r}: expected exactly one <collision>")
        geom_elem = coll[0].find("geometry")
        if geom_elem is None:
            raise HandParseError(f"link {lname!r}: <collision> without <geometry>")
        geometry = _parse_geometry(geom_elem, f"link {lname!r}")
        local = _parse_origin(coll[0].find("origin"), f"link {lname!r} origin")
        raw_links.append((lname, geometry, local))

    if not raw_links:
        raise HandParseError("hand has no links")
    link_ids = {lname: i for i, (lname, _, _) in enumerate(raw_links)}
    if len(link_ids) != len(raw_links):
        raise HandParseError("duplicate link names")

    joints = []
    for je in root.findall("joint"):
        jname = je.get("name", "<unnamed>")
        jtype = je.get("type")
        if jtype != "revolute":
            raise HandParseError(f"joint {jname!r}: unsupported element "
                                 f"<joint type=\"{jtype}\"> (revolute only)")
        for tag in ("parent", "child"):
            if je.find(tag) is None:
                raise HandParseError(f"joint {jname!r}: missing <{tag}>")
        parent = je.find("parent").get("link")
        child = je.find("child").get("link")
        for end, role in ((parent, "parent"), (child, "child")):
            if end not in link_ids:
                raise HandParseError(f"joint {jname!r}: {role} link {end!r} does not exist")
        origin = _parse_origin(je.find("origin"), f"joint {jname!r} origin")
        axis_elem = je.find("axis")
        axis = _parse_floats(axis_elem.get("xyz", "0 0 1") if axis_elem is not None else "0 0 1",
                             3, f"joint {jname!r} axis")
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise HandParseError(f"joint {jname!r}: zero axis")
        limit = je.find("limit")
        if limit is None:
            raise HandParseError(f"joint {jname!r}: missing <limit>")
        lo, hi = float(limit.get("lower", "nan")), float(limit.get("upper", "nan"))
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise HandParseError(f"joint {jname!r}: non-finite limits")
        if lo >= hi:
            raise HandParseError(f"joint {jname!r}: limits lower={lo} >= upper={hi}")
        joints.append(Joint(jname, link_ids[parent], link_ids[child], origin, axis / norm, lo, hi))

    # Tree structure: exactly one root (the palm), no cycles, all connected.
    children_of = {}
    for j in joints:
        if j.child_link in children_of:
            raise HandParseError(f"link {raw_links[j.child_link][0]!r} has two parent joints")
        children_of[j.child_link] = j
    roots = [i for i in range(len(raw_links)) if i not in children_of]
    if len(roots) != 1:
        names = [raw_links[i][0] for i in roots]
        raise HandParseError(f"expected exactly one root link, found {names}")
    root_id = roots[0]
    reached, stack = set(), [root_id]
    adj = {}
    for j in joints:
        adj.setdefault(j.parent_link, []).append(j.child_link)
    while stack:
        cur = stack.pop()
        if cur in reached:
            raise HandParseError("link graph contains a cycle")
        reached.add(cur)
        stack.extend(adj.get(cur, []))
    if len(reached) != len(raw_links):
        missing = [raw_links[i][0] for i in range(len(raw_links)) if i not in reached]
        raise HandParseError(f"links disconnected from the palm: {missing}")

    palm_name = ann["palm_link"]
    if palm_name not in link_ids:
        raise HandParseError(f"annotated palm link {palm_name!r} does not exist")
    if link_ids[palm_name] != root_id:
        raise HandParseError(f"palm link {palm_name!r} is not the root of the joint tree "
                             f"(root is {raw_links[root_id][0]!r})")
    palm_normal = np.asarray(ann["palm_normal"], dtype=np.float64)
    if palm_normal.shape != (3,) or np.linalg.norm(palm_normal) < 1e-12:
        raise HandParseError("palm_normal must be a nonzero 3-vector")
    palm_normal = palm_normal / np.linalg.norm(palm_normal)

    inner_points = ann["inner_points"]
    links = []
    for lname, geometry, local in raw_links:
        if lname not in inner_points:
            raise HandParseError(f"missing inner-point annotation for link {lname!r}")
        inner = np.asarray(inner_points[lname], dtype=np.float64)
        if inner.shape != (3,):
            raise HandParseError(f"link {lname!r}: inner point must be a 3-vector")
        d = geometry.surface_distance(inner)
        if d > INNER_POINT_TOL:
            raise HandParseError(f"link {lname!r}: inner point {inner.tolist()} is "
                                 f"{d:.3g} mm off the geometry surface")
        lo, hi = geometry.aabb()
        keypoint = (np.asarray(lo) + np.asarray(hi)) / 2.0
        links.append(Link(lname, geometry, local, inner, keypoint, geometry.surface_area()))

    # Joint order follows file order; FK requires parents to appear before
    # children, which holds for trees listed root-down. Reorder if needed.
    order = _topo_joint_order(joints, root_id)
    joints = tuple(joints[i] for i in order)

    return HandModel(name, tuple(links), joints, root_id, palm_normal)


def _topo_joint_order(joints, root_id) -> list:
    """Kahn's algorithm taking the lowest file index first, so an already
    parent-before-child file order is preserved verbatim."""
    placed = {root_id}
    order = []
    remaining = list(range(len(joints)))
    while remaining:
        pick = next((i for i in remaining if joints[i].parent_link in placed), None)
        if pick is None:
            raise HandParseError("joint graph is not a tree rooted at the palm")
        order.append(pick)
        placed.add(joints[pick].child_link)
        remaining.remove(pick)
    return order


def load_hand(urdf_path, annotations_path=None) -> HandModel:
    urdf_path = str(urdf_path)
    if annotations_path is None:
        annotations_path = urdf_path.removesuffix(".urdf") + ".hand.json"
    with io.open(urdf_path, "r", encoding="utf-8") as f:
        urdf_text = f.read()
    with io.open(str(annotations_path), "r", encoding="utf-8") as f:
        annotations_text = f.read()
    return parse_hand(urdf_text, annotations_text)


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def forward_kinematics(model: HandModel, q: JointConfig) -> list:
    """World pose of every link's primitive frame, in model.links order."""
    radians = q.radians
    if len(radians) != model.n_joints:
        raise ValueError(f"config has {len(radians)} joints, model has {model.n_joints}")
    chain = [None] * model.n_links
    chain[model.palm_link_id] = model.root_transform
    for j, joint in enumerate(model.joints):
        rot = RigidTransform(rotation_about_axis(joint.axis, radians[j]), np.zeros(3))
        chain[joint.child_link] = chain[joint.parent_link] @ joint.origin @ rot
    return [chain[i] @ model.links[i].local_transform for i in range(model.n_links)]


def link_keypoints(model: HandModel, q: JointConfig) -> np.ndarray:
    """World-frame bounding-box centers, shape (n_links, 3), mm."""
    transforms = forward_kinematics(model, q)
    return np.stack([t.apply(link.keypoint)
                     for t, link in zip(transforms, model.links)])


# ---------------------------------------------------------------------------
# Serialization (round-trip support)
# ---------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(values))


def _rpy_from_rotation(R: np.ndarray) -> np.ndarray:
    # Inverse of rotation_from_rpy; pitch in [-pi/2, pi/2].
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    if abs(np.cos(pitch)) > 1e-12:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    else:  # gimbal lock: fold everything into roll
        roll = np.arctan2(-R[1, 2], R[1, 1])
        yaw = 0.0
    return np.array([roll, pitch, yaw])


def _origin_xml(t: RigidTransform) -> str:
    return (f'<origin xyz="{_fmt(t.translation)}" '
            f'rpy="{_fmt(_rpy_from_rotation(t.rotation))}"/>')


def serialize_hand(model: HandModel) -> tuple:
    """Emit (urdf_text, annotations_text) that reparse to an equal model."""
    out = [f'<robot name="{model.name}">']
    for link in model.links:
        g = link.geometry
        if g.kind == "box":
            geom = f'<box size="{_fmt(g.size)}"/>'
        elif g.kind == "sphere":
            geom = f'<sphere radius="{g.radius!r}"/>'
        else:
            geom = f'<{g.kind} radius="{g.radius!r}" length="{g.length!r}"/>'
        out.append(f'  <link name="{link.name}">')
        out.append(f'    <collision>{_origin_xml(link.local_transform)}'
                   f'<geometry>{geom}</geometry></collision>')
        out.append('  </link>')
    for joint in model.joints:
        out.append(f'  <joint name="{joint.name}" type="revolute">')
        out.append(f'    {_origin_xml(joint.origin)}')
        out.append(f'    <parent link="{model.links[joint.parent_link].name}"/>')
        out.append(f'    <child link="{model.links[joint.child_link].name}"/>')
        out.append(f'    <axis xyz="{_fmt(joint.axis)}"/>')
        out.append(f'    <limit lower="{joint.limit_lo!r}" upper="{joint.limit_hi!r}"/>')
        out.append('  </joint>')
    out.append('</robot>')
    ann = {
        "palm_link": model.links[model.palm_link_id].name,
        "palm_normal": [float(v) for v in model.palm_normal],
        "inner_points": {link.name: [float(v) for v in link.inner_point]
                         for link in model.links},
    }
    return "\n".join(out) + "\n", json.dumps(ann, indent=2)
