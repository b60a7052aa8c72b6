"""Robot-to-human data pairing, extreme-pose filtering and batch resampling.

Pipeline per sample index ``i``: draw ``q`` with a per-index seed, run
robot FK, scale the mapped link positions into the human frame, solve
latent IK for a human pose ``H``, denoise it with the prior and keep the
reconstruction error ``phi``. Filtering and resampling are separate
stages operating on the stored ``phi`` values.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .body import human_fk, swing_fit_pose
from .kinematics import forward_kinematics_batch, link_transforms, sample_joint_vector
from .neural import canonical_json
from .prior import IKConfig, ik_solve_batch, pose_error
from .rotations import sixd_to_rotmat

logger = logging.getLogger(__name__)

DATASET_FORMAT = "posepair.dataset/1"
CALIBRATION_FORMAT = "posepair.calibration/1"
RECORD_FIELDS = ("q", "R", "H", "phi", "ik_residual", "seed")
DEFAULT_IK_CAP = 0.10  # meters


@dataclass
class ScaleTheta:
    """Maps robot link positions into the human frame: ``s * p + t``."""

    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    link_scales: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scale = float(self.scale)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def to_dict(self):
        return {
            "scale": self.scale,
            "translation": self.translation.tolist(),
            "link_scales": {k: float(v) for k, v in self.link_scales.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        doc = doc or {}
        return cls(doc.get("scale", 1.0), doc.get("translation", [0.0, 0.0, 0.0]), dict(doc.get("link_scales", {})))


def resolve_joint_map(profile, body):
    """(link indices, human joint indices, weights) of the profile's IK targets."""
    links, joints, weights = [], [], []
    for link, joint, weight in profile.human_joint_map:
        try:
            links.append(profile.chain.link_index(link))
        except KeyError:
            raise KeyError(f"unmapped link reference {link!r}") from None
        joints.append(body.joint_index(joint))
        weights.append(weight)
    return np.array(links), np.array(joints), np.array(weights, dtype=float)


def map_target_positions(P, profile, theta):
    """Scaled target positions for link positions ``P`` (..., m, 3) -> (..., T, 3)."""
    P = np.asarray(P, dtype=float)
    out = []
    for link, _, _ in profile.human_joint_map:
        idx = profile.chain.link_index(link)
        s = theta.link_scales.get(link, theta.scale)
        out.append(s * P[..., idx, :] + theta.translation)
    return np.stack(out, axis=-2)


def map_targets(P, profile, theta):
    """IK target list ``[(human joint, position, weight), ...]`` for one pose."""
    pos = map_target_positions(P, profile, theta)
    return [(joint, pos[i], weight) for i, (_, joint, weight) in enumerate(profile.human_joint_map)]


def derive_seed(base_seed, index):
    """Per-sample seed, a hash of (base_seed, index)."""
    digest = hashlib.sha256(f"{int(base_seed)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class PairedDataset:
    q: np.ndarray  # (N, n)
    R: np.ndarray  # (N, m, 6)
    H: np.ndarray  # (N, k, 6)
    phi: np.ndarray  # (N,)
    ik_residual: np.ndarray  # (N,) mean target residual, meters
    seeds: np.ndarray  # (N,) uint64-safe python ints
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.phi)

    def subset(self, idx, **header_updates):
        idx = np.asarray(idx)
        header = dict(self.header)
        header.update(header_updates)
        header["count"] = int(np.count_nonzero(idx) if idx.dtype == bool else len(idx))
        return PairedDataset(
            self.q[idx], self.R[idx], self.H[idx], self.phi[idx], self.ik_residual[idx], self.seeds[idx], header
        )

    def write(self, path):
        header = dict(self.header)
        header["format"] = DATASET_FORMAT
        header["fields"] = list(RECORD_FIELDS)
        header["count"] = len(self)
        with open(path, "w") as f:
            f.write(canonical_json(header) + "\n")
            for i in range(len(self)):
                rec = {
                    "q": self.q[i].tolist(),
                    "R": self.R[i].ravel().tolist(),
                    "H": self.H[i].ravel().tolist(),
                    "phi": float(self.phi[i]),
                    "ik_residual": float(self.ik_residual[i]),
                    "seed": int(self.seeds[i]),
                }
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("format") != DATASET_FORMAT:
                raise ValueError(f"{path}: not a paired dataset file")
            recs = [json.loads(line) for line in f if line.strip()]
        n, m, k = header["n"], header["m"], header["k"]
        N = len(recs)
        return cls(
            q=np.array([r["q"] for r in recs], dtype=float).reshape(N, n),
            R=np.array([r["R"] for r in recs], dtype=float).reshape(N, m, 6),
            H=np.array([r["H"] for r in recs], dtype=float).reshape(N, k, 6),
            phi=np.array([r["phi"] for r in recs], dtype=float),
            ik_residual=np.array([r["ik_residual"] for r in recs], dtype=float),
            seeds=np.array([r["seed"] for r in recs], dtype=np.uint64),
            header=header,
        )

    @staticmethod
    def concatenate(parts, header=None):
        parts = list(parts)
        return PairedDataset(
            *(np.concatenate([getattr(p, a) for p in parts]) for a in ("q", "R", "H", "phi", "ik_residual", "seeds")),
            header=dict(header if header is not None else parts[0].header),
        )


def _generate_chunk(args):
    profile, prior, body, theta, base_seed, indices, ik_config = args
    chain = profile.chain
    _, joints, weights = resolve_joint_map(profile, body)
    seeds = [derive_seed(base_seed, i) for i in indices]
    Q = np.array([sample_joint_vector(chain, profile, s) for s in seeds]).reshape(len(indices), chain.n)
    R6, P = forward_kinematics_batch(chain, Q)
    targets = map_target_positions(P, profile, theta)
    results = ik_solve_batch(prior, body, joints, targets, weights, ik_config)
    H = np.stack([r.pose for r in results])
    phi = prior.reconstruction_error(H)
    resid = np.array([r.mean_residual for r in results])
    return Q, R6, H, phi, resid, np.array(seeds, dtype=np.uint64)


def generate_pairs(
    profile,
    prior,
    body,
    theta,
    N,
    base_seed,
    ik_config=None,
    chunk_size=32,
    start=0,
    workers=1,
):
    """Run the pairing loop for indices ``start .. start + N - 1``.

    Chunks are aligned to multiples of ``chunk_size`` so any split of the
    index range on chunk boundaries (including parallel workers) yields
    the same records as one serial run.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if prior.n_features_in_ != 6 * body.k:
        raise ValueError(f"prior expects {prior.n_features_in_ // 6} joints, body has {body.k}")
    ik_config = ik_config or IKConfig()
    stop = start + N
    bounds = []
    lo = start
    while lo < stop:
        hi = min(stop, (lo // chunk_size + 1) * chunk_size)
        bounds.append((lo, hi))
        lo = hi
    jobs = [(profile, prior, body, theta, base_seed, list(range(a, b)), ik_config) for a, b in bounds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_chunk, jobs))
    else:
        parts = []
        for n_done, job in enumerate(jobs):
            parts.append(_generate_chunk(job))
            logger.debug("pairing chunk %d/%d", n_done + 1, len(jobs))
    cols = [np.concatenate([p[c] for p in parts]) for c in range(6)]
    header = {
        "n": profile.chain.n,
        "m": profile.chain.m,
        "k": body.k,
        "joint_names": profile.chain.joint_names,
        "link_names": list(profile.chain.links),
        "profile_hash": profile.source_hash,
        "body_hash": body.source_hash,
        "prior_hash": prior.checksum,
        "theta": theta.to_dict(),
        "base_seed": int(base_seed),
        "start": int(start),
        "count": int(N),
        "chunk_size": int(chunk_size),
        "ik_config": ik_config.to_dict(),
        "phi_metric": "mean over joints of squared 6D difference",
    }
    return PairedDataset(*cols, header=header), cols[3]


def extreme_threshold(phi):
    """Mean plus one population standard deviation."""
    phi = np.asarray(phi, dtype=float)
    # shifted by the minimum so equal values give back exactly that value
    lo = phi.min()
    d = phi - lo
    return float(lo + (np.mean(d) + np.std(d)))


@dataclass
class FilterReport:
    tau: float
    n_total: int
    n_kept: int
    n_removed_phi: int
    n_removed_ik: int
    ik_cap: float | None

    @property
    def removed_fraction(self):
        return 1.0 - self.n_kept / self.n_total if self.n_total else 0.0

    def to_dict(self):
        d = dict(self.__dict__)
        d["removed_fraction"] = self.removed_fraction
        return d


def filter_extreme(D, phi=None, ik_cap=None):
    """Drop samples with ``phi > tau`` where ``tau = mean + std`` of ``phi``.

    ``D`` is a :class:`PairedDataset` or any sequence aligned with ``phi``.
    ``ik_cap`` (meters) additionally drops samples whose IK residual
    exceeds it; ``tau`` is always computed from the full ``phi``.
    Returns ``(kept, report)``.
    """
    if phi is None:
        phi = D.phi
    phi = np.asarray(phi, dtype=float)
    if len(phi) < 2:
        raise ValueError("filtering needs at least two samples")
    if len(D) != len(phi):
        raise ValueError("dataset and phi lengths differ")
    tau = extreme_threshold(phi)
    keep = phi <= tau
    n_phi = int(np.count_nonzero(~keep))
    n_ik = 0
    if ik_cap is not None and isinstance(D, PairedDataset):
        ik_ok = D.ik_residual <= ik_cap
        n_ik = int(np.count_nonzero(keep & ~ik_ok))
        keep &= ik_ok
    report = FilterReport(tau, len(phi), int(keep.sum()), n_phi, n_ik, ik_cap)
    if isinstance(D, PairedDataset):
        kept = D.subset(keep, filter=report.to_dict(), phi_min=float(phi[keep].min()) if keep.any() else None)
    else:
        kept = [d for d, k in zip(D, keep) if k]
    return kept, report


def resample_probability(phi, phi_min, tau):
    """Acceptance probability, linear from 1 at ``phi_min`` to 0.5 at ``tau``."""
    phi = np.asarray(phi, dtype=float)
    if tau <= phi_min:
        return np.ones_like(phi) if phi.ndim else 1.0
    p = 1.0 - 0.5 * (phi - phi_min) / (tau - phi_min)
    return np.clip(p, 0.5, 1.0)


def sample_training_batch(phi, batch_size, seed, phi_min=None, tau=None, return_stats=False):
    """Bernoulli rejection sampling of a batch of distinct indices.

    Candidates are drawn uniformly and accepted with probability
    :func:`resample_probability`; repeats within one batch are rejected.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    phi = np.asarray(phi, dtype=float)
    N = len(phi)
    if N == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    phi_min = float(phi.min()) if phi_min is None else phi_min
    tau = float(phi.max()) if tau is None else tau
    p_accept = resample_probability(phi, phi_min, tau)
    size = min(batch_size, N)
    chosen = np.zeros(N, dtype=bool)
    out = []
    draws = accepted = 0
    while len(out) < size:
        block = max(2 * (size - len(out)), 16)
        cand = rng.integers(0, N, size=block)
        u = rng.random(block)
        for c, ok in zip(cand, u < p_accept[cand]):
            draws += 1
            if not ok:
                continue
            accepted += 1
            if chosen[c]:
                continue
            chosen[c] = True
            out.append(c)
            if len(out) == size:
                break
    idx = np.array(out, dtype=int)
    if return_stats:
        return idx, {"draws": draws, "accepted": accepted}
    return idx


def human_pose_for_calibration(profile, body, prior, theta, Q, ik_config=None):
    """g_theta(q): the human poses the pairing loop assigns to joint vectors."""
    _, joints, weights = resolve_joint_map(profile, body)
    _, P = link_transforms(profile.chain, np.asarray(Q, dtype=float).reshape(-1, profile.chain.n))
    targets = map_target_positions(P, profile, theta)
    res = ik_solve_batch(prior, body, joints, targets, weights, ik_config)
    return np.stack([r.pose for r in res])


def _theta_ranges(profile, ranges):
    cfg = dict(profile.theta_search or {})
    cfg.update(ranges or {})
    s_range = cfg.get("scale", [0.5, 4.0])
    t_range = np.asarray(cfg.get("translation", [[-0.5, 0.5]] * 3), dtype=float)
    return s_range, t_range


def planted_calibration(profile, body, theta, count, seed, range_fraction=0.5):
    """Calibration pairs whose poses put the mapped human joints at
    ``theta``-scaled robot link positions (closed form, prior-free).

    Joint vectors are drawn from the central ``range_fraction`` of each
    joint's limits, the moderate poses a person would demonstrate.
    """
    _, joints, _ = resolve_joint_map(profile, body)
    lim = profile.chain.limits
    mid, half = lim.mean(axis=1), 0.5 * range_fraction * (lim[:, 1] - lim[:, 0])
    rng = np.random.default_rng([int(seed), 0xCA1])
    Q = mid + half * rng.uniform(-1.0, 1.0, size=(count, profile.chain.n))
    _, P = link_transforms(profile.chain, Q)
    targets = map_target_positions(P, profile, theta)
    H = np.stack([swing_fit_pose(body, dict(zip(joints, t))) for t in targets])
    return [(q, h) for q, h in zip(Q, H)]


def write_calibration(path, pairs, header):
    header = dict(header, format=CALIBRATION_FORMAT, count=len(pairs))
    with open(path, "w") as f:
        f.write(canonical_json(header) + "\n")
        for q, h in pairs:
            f.write(json.dumps({"q": np.asarray(q).tolist(), "H": np.asarray(h).ravel().tolist()}) + "\n")


def read_calibration(path=None):
    """Returns (header, [(q, H)]); ``None`` reads the bundled Reachy-like set."""
    if path is None:
        text = resources.files("posepair.data").joinpath("reachy_like_calibration.jsonl").read_text()
    else:
        with open(path) as f:
            text = f.read()
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty calibration file")
    header = json.loads(lines[0])
    if header.get("format") != CALIBRATION_FORMAT:
        raise ValueError("not a calibration file")
    pairs = []
    for line in lines[1:]:
        rec = json.loads(line)
        pairs.append((np.asarray(rec["q"], dtype=float), np.asarray(rec["H"], dtype=float).reshape(-1, 6)))
    return header, pairs


def search_theta(
    calibration, profile, prior, body, trials, seed, ranges=None, candidates=None, ik_config=None, compare="mapped"
):
    """Uniform random search for the scale/offset minimising calibration error.

    ``calibration`` is a list of ``(q, H)`` pairs. Error of a trial is the
    mean human-FK joint distance between ``g_theta(q)`` and ``H`` over the
    profile's mapped joints (``compare="all"``: every body joint).
    ``candidates`` are evaluated in addition to ``trials`` random draws.
    Returns ``(best_theta, best_error, log)``.
    """
    if len(calibration) == 0:
        raise ValueError("empty calibration set")
    if compare not in ("mapped", "all"):
        raise ValueError("compare must be 'mapped' or 'all'")
    Q = np.array([c[0] for c in calibration], dtype=float)
    Hc = np.array([np.asarray(c[1], dtype=float).reshape(body.k, 6) for c in calibration])
    ref_pos = human_fk(body, Hc)
    rng = np.random.default_rng(seed)
    s_range, t_range = _theta_ranges(profile, ranges)
    thetas = list(candidates or [])
    for _ in range(trials):
        s = rng.uniform(s_range[0], s_range[1])
        t = rng.uniform(t_range[:, 0], t_range[:, 1])
        thetas.append(ScaleTheta(s, t))

    _, joints, weights = resolve_joint_map(profile, body)
    _, P = link_transforms(profile.chain, Q)
    all_targets = np.concatenate([map_target_positions(P, profile, th) for th in thetas])
    poses = []
    chunk = 64
    for a in range(0, len(all_targets), chunk):
        res = ik_solve_batch(prior, body, joints, all_targets[a:a + chunk], weights, ik_config)
        poses.extend(r.pose for r in res)
    pos = human_fk(body, np.stack(poses)).reshape(len(thetas), len(Q), body.k, 3)
    cols = sorted(set(joints)) if compare == "mapped" else slice(None)
    errors = np.linalg.norm(pos[:, :, cols] - ref_pos[None][:, :, cols], axis=-1).mean(axis=(1, 2))
    best = int(np.argmin(errors))
    log = [{"theta": th.to_dict(), "error": float(e)} for th, e in zip(thetas, errors)]
    return thetas[best], float(errors[best]), log


def verify_dataset(D, chain, tol=1e-9):
    """Self-consistency problems of a dataset (empty list when clean)."""
    problems = []
    if len(D) == 0:
        return problems
    if D.q.shape[1] != chain.n or D.R.shape[1] != chain.m:
        return [f"dataset dims (n={D.q.shape[1]}, m={D.R.shape[1]}) do not match chain (n={chain.n}, m={chain.m})"]
    R6, _ = forward_kinematics_batch(chain, D.q)
    err = np.abs(R6 - D.R).max(axis=(1, 2))
    for i in np.flatnonzero(err > tol):
        problems.append(f"record {i}: stored R differs from FK(q) by {err[i]:.3g}")
    lim = chain.limits
    bad_q = np.any((D.q < lim[:, 0]) | (D.q > lim[:, 1]), axis=1)
    for i in np.flatnonzero(bad_q):
        problems.append(f"record {i}: q outside joint limits")
    for i in np.flatnonzero(~np.isfinite(D.phi) | (D.phi < 0)):
        problems.append(f"record {i}: invalid phi {D.phi[i]}")
    if not np.all(np.isfinite(D.H)):
        problems.append("non-finite human pose values")
    else:
        try:
            sixd_to_rotmat(D.H)
        except ValueError as exc:
            problems.append(f"undecodable human pose: {exc}")
    if len(np.unique(D.seeds)) != len(D.seeds):
        problems.append("duplicate sample seeds")
    return problems


def recompute_phi(prior, D):
    return pose_error(D.H.reshape(len(D), -1), prior.reconstruct(D.H.reshape(len(D), -1)))
