"""Reference human skeleton, its forward kinematics and a synthetic pose corpus.

Human poses are (k, 6) arrays of per-joint 6D rotations (flattened
joint-major to 6k). Joint ``j``'s rotation moves its descendants; the
root (pelvis) is fixed at the origin with identity orientation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .rotations import axis_angle_to_rotmat, rotmat_to_sixd, sixd_to_rotmat

CORPUS_FORMAT = "posepair.corpus/1"


@dataclass(frozen=True, eq=False)
class ReferenceBody:
    name: str
    joint_names: tuple
    parents: np.ndarray  # index of parent joint, -1 for children of the root
    offsets: np.ndarray  # (k, 3) rest offsets from the parent joint
    limits: np.ndarray  # (k, 3, 2) axis-angle component boxes
    mobility: np.ndarray  # (k,) loading scale for the corpus factors
    mean_pose: np.ndarray  # (k, 3) axis-angle
    source_hash: str = ""

    def __post_init__(self):
        k = len(self.joint_names)
        for j, p in enumerate(self.parents):
            if p >= j:
                raise ValueError("joints must be listed parents-first (tree is acyclic)")
        if np.any(np.linalg.norm(self.offsets, axis=1) <= 0):
            raise ValueError("bone lengths must be positive")
        if self.offsets.shape != (k, 3) or self.limits.shape != (k, 3, 2):
            raise ValueError("inconsistent body array shapes")

    @property
    def k(self):
        return len(self.joint_names)

    @property
    def bone_lengths(self):
        return np.linalg.norm(self.offsets, axis=1)

    def joint_index(self, ref):
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < self.k:
                raise KeyError(f"joint index {ref} out of range")
            return int(ref)
        try:
            return self.joint_names.index(ref)
        except ValueError:
            raise KeyError(f"unknown body joint {ref!r}") from None

    def ancestors(self, j):
        out = []
        p = self.parents[j]
        while p >= 0:
            out.append(int(p))
            p = self.parents[p]
        return out

    def chain_length(self, j):
        """Distance from the root to joint ``j`` along the bones."""
        return float(self.bone_lengths[[j] + self.ancestors(j)].sum())


def body_from_dict(doc, source_hash=""):
    joints = doc["joints"]
    names = [j["name"] for j in joints]
    parents = []
    for j in joints:
        p = j.get("parent")
        if p is None:
            parents.append(-1)
        elif p not in names:
            raise ValueError(f"joint {j['name']!r} has unknown parent {p!r}")
        else:
            parents.append(names.index(p))
    return ReferenceBody(
        name=doc.get("name", "body"),
        joint_names=tuple(names),
        parents=np.array(parents, dtype=int),
        offsets=np.array([j["offset"] for j in joints], dtype=float),
        limits=np.array([j["limits"] for j in joints], dtype=float),
        mobility=np.array([j.get("mobility", 0.1) for j in joints], dtype=float),
        mean_pose=np.array([j.get("mean", [0.0, 0.0, 0.0]) for j in joints], dtype=float),
        source_hash=source_hash,
    )


def load_body(path=None):
    """Load a body description; ``None`` gives the bundled 21-joint body."""
    if path is None:
        raw = resources.files("posepair.data").joinpath("reference_body.json").read_bytes()
    else:
        raw = Path(path).read_bytes()
    return body_from_dict(json.loads(raw), hashlib.sha256(raw).hexdigest())


def _as_pose_array(body, H):
    H = np.asarray(H, dtype=float)
    if H.shape[-1] == 6 * body.k and (H.ndim == 1 or H.shape[-2:] != (body.k, 6)):
        H = H.reshape(H.shape[:-1] + (body.k, 6))
    if H.shape[-2:] != (body.k, 6):
        raise ValueError(f"human pose must be (..., {body.k}, 6) or (..., {6 * body.k}), got {H.shape}")
    return H


def human_fk(body, H, joints=None):
    """Joint positions (..., k, 3) for poses ``H``.

    ``joints`` restricts the evaluation to a parents-first closed subset
    (other rows are left as NaN).
    """
    H = _as_pose_array(body, H)
    rots = sixd_to_rotmat(H)
    batch = H.shape[:-2]
    pos = np.full(batch + (body.k, 3), np.nan)
    glob = np.empty(batch + (body.k, 3, 3))
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    origin = np.zeros(batch + (3,))
    order = range(body.k) if joints is None else sorted(joints)
    for j in order:
        p = body.parents[j]
        Gp = eye if p < 0 else glob[..., p, :, :]
        pp = origin if p < 0 else pos[..., p, :]
        pos[..., j, :] = pp + Gp @ body.offsets[j]
        glob[..., j, :, :] = Gp @ rots[..., j, :, :]
    return pos


def rest_positions(body):
    """T-pose joint positions from cumulative bone offsets."""
    pos = np.zeros((body.k, 3))
    for j in range(body.k):
        p = body.parents[j]
        pos[j] = (0.0 if p < 0 else pos[p]) + body.offsets[j]
    return pos


def identity_pose(body):
    return np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], (body.k, 1))


def axis_angles_to_pose(A):
    """(..., k, 3) axis-angle -> (..., k, 6)."""
    return rotmat_to_sixd(axis_angle_to_rotmat(A), validate=False)


def corpus_factors(body, rank, seed):
    """Seed-fixed factor loadings (3k, rank), scaled by per-joint mobility."""
    rng = np.random.default_rng([int(seed), 0xC0])
    scale = np.repeat(body.mobility, 3)[:, None]
    return rng.standard_normal((3 * body.k, rank)) * scale


def generate_corpus_angles(body, count, rank, seed, noise=0.05, model_seed=0):
    if rank < 0 or rank >= 3 * body.k:
        raise ValueError(f"rank must be in [0, {3 * body.k})")
    F = corpus_factors(body, rank, model_seed)
    rng = np.random.default_rng([int(seed), 0xDA7A])
    coeffs = rng.standard_normal((count, rank))
    eps = rng.standard_normal((count, 3 * body.k)) * noise
    A = body.mean_pose.ravel() + coeffs @ F.T + eps
    A = A.reshape(count, body.k, 3)
    return np.clip(A, body.limits[..., 0], body.limits[..., 1])


def generate_corpus(body, count, rank, seed, noise=0.05, model_seed=0):
    """Natural-pose corpus: low-rank Gaussian model in joint-angle space.

    ``model_seed`` fixes the factor loadings (the "population"), ``seed``
    the draws, so held-out sets share the model. Returns (count, k, 6)
    poses.
    """
    if count == 0:
        return np.zeros((0, body.k, 6))
    return axis_angles_to_pose(generate_corpus_angles(body, count, rank, seed, noise, model_seed))


def sample_uniform_rom(body, count, seed):
    """Poses drawn uniformly from the per-joint limit boxes (off-manifold)."""
    rng = np.random.default_rng(seed)
    lo, hi = body.limits[..., 0], body.limits[..., 1]
    A = lo + (hi - lo) * rng.random((count, body.k, 3))
    return axis_angles_to_pose(A)


def write_corpus(path, poses, body, meta=None):
    poses = np.asarray(poses, dtype=float).reshape(len(poses), -1)
    header = {"format": CORPUS_FORMAT, "k": body.k, "joints": list(body.joint_names), "count": len(poses)}
    header.update(meta or {})
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for h in poses:
            f.write(json.dumps({"H": h.tolist()}) + "\n")


def read_corpus(path):
    """Returns (header, poses (N, k, 6))."""
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"{path}: not a corpus file")
        k = header["k"]
        rows = [json.loads(line)["H"] for line in f if line.strip()]
    poses = np.array(rows, dtype=float).reshape(-1, k, 6)
    return header, poses


def _swing(u, v):
    """Minimal rotation taking direction ``u`` onto direction ``v``."""
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    axis = np.cross(u, v)
    s, c = np.linalg.norm(axis), float(np.dot(u, v))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half-turn about any axis orthogonal to u
        w = np.cross(u, [1.0, 0.0, 0.0] if abs(u[0]) < 0.9 else [0.0, 1.0, 0.0])
        return axis_angle_to_rotmat(np.pi * w / np.linalg.norm(w))
    return axis_angle_to_rotmat(axis / s * np.arctan2(s, c))


def swing_fit_pose(body, targets):
    """Closed-form pose aiming bones at target joint positions.

    ``targets`` maps joint names/indices to positions. For every targeted
    joint whose parent is also targeted, the parent's rotation is the
    minimal swing pointing the bone at the target; everything else stays
    at identity. Bone lengths are not stretched, so targets off the
    reachable sphere are hit in direction only. Returns a (k, 6) pose.
    """
    idx = {body.joint_index(j): np.asarray(p, dtype=float) for j, p in targets.items()}
    rots = np.tile(np.eye(3), (body.k, 1, 1))
    for j in sorted(idx):
        p = body.parents[j]
        if p < 0 or p not in idx:
            continue
        pos = human_fk(body, rotmat_to_sixd(rots, validate=False))
        gp = np.eye(3)
        for a in reversed(body.ancestors(p)):
            gp = gp @ rots[a]
        want = gp.T @ (idx[j] - pos[p])
        rots[p] = _swing(body.offsets[j], want)
    return rotmat_to_sixd(rots, validate=False)
