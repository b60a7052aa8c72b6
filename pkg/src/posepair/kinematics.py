"""URDF-subset kinematic chains, forward kinematics and joint sampling.

Only ``revolute`` and ``fixed`` joints are supported. Links are ordered
depth-first from the root, visiting child joints in file order; revolute
joints in that same traversal define the joint-vector order.
"""
from __future__ import annotations

import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import axis_angle_to_rotmat, rotmat_to_sixd, rpy_to_rotmat


class URDFError(ValueError):
    pass


class MalformedURDFError(URDFError):
    pass


class UnsupportedJointError(URDFError):
    pass


class MissingLimitError(URDFError):
    pass


class DanglingReferenceError(URDFError):
    pass


class CyclicChainError(URDFError):
    pass


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class JointSpec:
    name: str
    type: str
    parent_link: str
    child_link: str
    axis: tuple = (0.0, 0.0, 1.0)
    origin_translation: tuple = (0.0, 0.0, 0.0)
    origin_rotation: tuple = (0.0, 0.0, 0.0)
    limit_lower: float = 0.0
    limit_upper: float = 0.0


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Immutable tree of links connected by revolute/fixed joints."""

    name: str
    links: tuple
    joints: tuple  # every joint, depth-first order

    def __post_init__(self):
        link_index = {name: i for i, name in enumerate(self.links)}
        revolute = [j for j in self.joints if j.type == "revolute"]
        object.__setattr__(self, "_link_index", link_index)
        object.__setattr__(self, "revolute_joints", tuple(revolute))
        q_index = {j.name: i for i, j in enumerate(revolute)}
        plan = []
        for j in self.joints:
            plan.append(
                (
                    link_index[j.parent_link],
                    link_index[j.child_link],
                    rpy_to_rotmat(j.origin_rotation),
                    np.asarray(j.origin_translation, dtype=float),
                    np.asarray(j.axis, dtype=float),
                    q_index.get(j.name, -1),
                )
            )
        object.__setattr__(self, "_plan", tuple(plan))

    @property
    def n(self):
        return len(self.revolute_joints)

    @property
    def m(self):
        return len(self.links)

    @property
    def joint_names(self):
        return [j.name for j in self.revolute_joints]

    @property
    def limits(self):
        """(n, 2) array of [lower, upper] in radians."""
        return np.array([[j.limit_lower, j.limit_upper] for j in self.revolute_joints], dtype=float).reshape(-1, 2)

    def link_index(self, name):
        try:
            return self._link_index[name]
        except KeyError:
            raise KeyError(f"unknown link {name!r}") from None


def _floats(text, count, what):
    try:
        vals = tuple(float(x) for x in text.split())
    except ValueError:
        raise MalformedURDFError(f"non-numeric {what}: {text!r}") from None
    if len(vals) != count:
        raise MalformedURDFError(f"{what} needs {count} values, got {text!r}")
    return vals


def parse_urdf(text):
    """Parse URDF XML into a :class:`KinematicChain`."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedURDFError(f"malformed XML: {exc}") from None
    if root.tag != "robot":
        raise MalformedURDFError(f"root element must be <robot>, got <{root.tag}>")

    link_names = []
    for el in root.findall("link"):
        name = el.get("name")
        if not name:
            raise MalformedURDFError("<link> without a name")
        if name in link_names:
            raise MalformedURDFError(f"duplicate link {name!r}")
        link_names.append(name)

    joints = []
    for el in root.findall("joint"):
        joints.append(_parse_joint(el))

    known = set(link_names)
    names = set()
    for j in joints:
        if j.name in names:
            raise MalformedURDFError(f"duplicate joint {j.name!r}")
        names.add(j.name)
        for ref in (j.parent_link, j.child_link):
            if ref not in known:
                raise DanglingReferenceError(f"joint {j.name!r} references unknown link {ref!r}")

    parent_of = {}
    for j in joints:
        if j.child_link in parent_of:
            raise CyclicChainError(f"link {j.child_link!r} has more than one parent joint")
        parent_of[j.child_link] = j
    roots = [name for name in link_names if name not in parent_of]
    if not roots:
        raise CyclicChainError("every link has a parent: the joint graph is cyclic")
    if len(roots) > 1:
        raise DanglingReferenceError(f"disconnected links, multiple roots: {roots}")

    children = {name: [] for name in link_names}
    for j in joints:
        children[j.parent_link].append(j)

    ordered_links, ordered_joints = [], []
    stack = [roots[0]]
    while stack:
        link = stack.pop()
        ordered_links.append(link)
        for j in reversed(children[link]):
            stack.append(j.child_link)
    for link in ordered_links[1:]:
        ordered_joints.append(parent_of[link])
    if len(ordered_links) != len(link_names):
        raise CyclicChainError("links unreachable from the root form a cycle")

    return KinematicChain(root.get("name", "robot"), tuple(ordered_links), tuple(ordered_joints))


def _parse_joint(el):
    name = el.get("name")
    jtype = el.get("type")
    if not name or not jtype:
        raise MalformedURDFError("<joint> requires name and type")
    if jtype not in ("revolute", "fixed"):
        raise UnsupportedJointError(f"joint {name!r} has unsupported type {jtype!r}")
    parent, child = el.find("parent"), el.find("child")
    if parent is None or child is None or not parent.get("link") or not child.get("link"):
        raise MalformedURDFError(f"joint {name!r} needs <parent link=..> and <child link=..>")
    xyz, rpy = (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
    origin = el.find("origin")
    if origin is not None:
        xyz = _floats(origin.get("xyz", "0 0 0"), 3, f"origin xyz of {name}")
        rpy = _floats(origin.get("rpy", "0 0 0"), 3, f"origin rpy of {name}")
    axis = (1.0, 0.0, 0.0)
    axis_el = el.find("axis")
    if axis_el is not None:
        axis = _floats(axis_el.get("xyz", "1 0 0"), 3, f"axis of {name}")
    lower = upper = 0.0
    if jtype == "revolute":
        norm = float(np.linalg.norm(axis))
        if norm < 1e-12:
            raise MalformedURDFError(f"joint {name!r} has a zero axis")
        axis = tuple(float(a) / norm for a in axis)
        limit = el.find("limit")
        if limit is None or limit.get("lower") is None or limit.get("upper") is None:
            raise MissingLimitError(f"revolute joint {name!r} needs <limit lower=.. upper=..>")
        lower = _floats(limit.get("lower"), 1, f"lower limit of {name}")[0]
        upper = _floats(limit.get("upper"), 1, f"upper limit of {name}")[0]
        if lower > upper:
            raise MalformedURDFError(f"joint {name!r} has lower > upper limit")
    return JointSpec(
        name=name,
        type=jtype,
        parent_link=parent.get("link"),
        child_link=child.get("link"),
        axis=tuple(axis),
        origin_translation=xyz,
        origin_rotation=rpy,
        limit_lower=lower,
        limit_upper=upper,
    )


def load_urdf(path):
    return parse_urdf(Path(path).read_text())


@dataclass
class RobotPose:
    """Per-link orientations ``R`` (m, 6) in 6D and positions ``P`` (m, 3)."""

    R: np.ndarray
    P: np.ndarray


def link_transforms(chain, Q):
    """Batched FK. ``Q`` (N, n) -> rotations (N, m, 3, 3), positions (N, m, 3)."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != chain.n:
        raise ValueError(f"joint array must have shape (N, {chain.n}), got {Q.shape}")
    N = Q.shape[0]
    rot = np.empty((N, chain.m, 3, 3))
    pos = np.empty((N, chain.m, 3))
    rot[:, 0] = np.eye(3)
    pos[:, 0] = 0.0
    for parent, child, R0, t0, axis, qi in chain._plan:
        Rp = rot[:, parent]
        pos[:, child] = pos[:, parent] + Rp @ t0
        Rc = Rp @ R0
        if qi >= 0:
            Rc = Rc @ axis_angle_to_rotmat(Q[:, qi, None] * axis)
        rot[:, child] = Rc
    return rot, pos


def forward_kinematics(chain, q):
    """FK for one joint vector: returns :class:`RobotPose`."""
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ValueError(f"joint vector must have shape ({chain.n},), got {q.shape}")
    rot, pos = link_transforms(chain, q[None])
    return RobotPose(R=rotmat_to_sixd(rot[0], validate=False), P=pos[0])


def forward_kinematics_batch(chain, Q):
    """Batched FK returning 6D orientations (N, m, 6) and positions (N, m, 3)."""
    rot, pos = link_transforms(chain, Q)
    return rotmat_to_sixd(rot, validate=False), pos


@dataclass
class RobotProfile:
    """A chain plus the retargeting metadata for one robot."""

    chain: KinematicChain
    key_links: list
    human_joint_map: list  # (link name, human joint name or index, weight)
    sampling_ranges: np.ndarray = None
    theta: dict = field(default_factory=dict)
    theta_search: dict = field(default_factory=dict)
    source_hash: str = ""

    def __post_init__(self):
        limits = self.chain.limits
        if self.sampling_ranges is None:
            self.sampling_ranges = limits.copy()
        self.sampling_ranges = np.asarray(self.sampling_ranges, dtype=float).reshape(-1, 2)
        for name in self.key_links:
            if name not in self.chain.links:
                raise ProfileError(f"key link {name!r} not in chain")
        for link, _, _ in self.human_joint_map:
            if link not in self.chain.links:
                raise ProfileError(f"mapped link {link!r} not in chain")
        lo, hi = self.sampling_ranges[:, 0], self.sampling_ranges[:, 1]
        if np.any(lo > hi) or np.any(lo < limits[:, 0] - 1e-12) or np.any(hi > limits[:, 1] + 1e-12):
            raise ProfileError("sampling ranges must lie within the URDF joint limits")

    @property
    def key_link_indices(self):
        return [self.chain.link_index(name) for name in self.key_links]


def load_profile(path):
    """Load a robot profile JSON document.

    Keys: ``urdf`` (path, relative to the profile), ``key_links``,
    ``human_joint_map`` (list of ``{"link", "joint", "weight"}``),
    optional ``sampling_ranges`` (``{joint: [lo, hi]}``), ``theta`` and
    ``theta_search``.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: invalid JSON: {exc}") from None
    for key in ("urdf", "key_links", "human_joint_map"):
        if key not in doc:
            raise ProfileError(f"{path}: missing key {key!r}")
    urdf_path = (path.parent / doc["urdf"]).resolve()
    urdf_text = urdf_path.read_text()
    chain = parse_urdf(urdf_text)
    ranges = chain.limits.copy()
    for jname, (lo, hi) in doc.get("sampling_ranges", {}).items():
        if jname not in chain.joint_names:
            raise ProfileError(f"sampling range for unknown joint {jname!r}")
        ranges[chain.joint_names.index(jname)] = (lo, hi)
    hjm = [(e["link"], e["joint"], float(e.get("weight", 1.0))) for e in doc["human_joint_map"]]
    digest = hashlib.sha256(raw + urdf_text.encode()).hexdigest()
    return RobotProfile(
        chain=chain,
        key_links=list(doc["key_links"]),
        human_joint_map=hjm,
        sampling_ranges=ranges,
        theta=dict(doc.get("theta", {})),
        theta_search=dict(doc.get("theta_search", {})),
        source_hash=digest,
    )


def sample_joint_vector(chain, profile, rng_seed):
    """Uniform draw within the profile's sampling ranges; deterministic per seed."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ranges = profile.sampling_ranges if profile is not None else chain.limits
    lo, hi = ranges[:, 0], ranges[:, 1]
    return lo + (hi - lo) * rng.random(chain.n)


def within_limits(chain, q, tol=0.0):
    lim = chain.limits
    q = np.asarray(q, dtype=float)
    return bool(np.all(q >= lim[:, 0] - tol) and np.all(q <= lim[:, 1] + tol))
