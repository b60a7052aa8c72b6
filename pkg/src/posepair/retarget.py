"""Supervised human-to-robot pose mapping.

:class:`TwoStageRetargeter` chains a pre-network (human 6D pose -> robot
link 6D orientations) and a post-network (link orientations -> joint
angles). Training minimises

    L_total = MSE(R, R_hat) + MSE(q, f_post(R)) + MSE(q, f_post(f_pre(H)))

with gradients of the student term flowing into both networks.
:class:`OneStageRetargeter` maps human poses straight to joint angles.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import neural
from .metrics import joint_error, link_errors
from .pairing import sample_training_batch
from .validation import check_joint_array, check_poses

logger = logging.getLogger(__name__)

MODEL_FORMAT = "posepair.retarget/1"
STREAM_FORMAT = "posepair.poses/1"
MOTION_FORMAT = "posepair.motion/1"


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss; ``last_good`` holds the last finite-loss networks."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def default_batch_size(n_samples):
    return 2048 if n_samples >= 100_000 else 512


def two_stage_losses(f_pre, f_post, H, R, q):
    """``(L_pre, L_post, L_total)`` for a batch, no clamping."""
    R_hat = neural.forward(f_pre, H)
    q_teacher = neural.forward(f_post, R)
    q_student = neural.forward(f_post, R_hat)
    l_pre = neural.mse(R, R_hat)
    l_post = neural.mse(q, q_teacher) + neural.mse(q, q_student)
    return l_pre, l_post, l_pre + l_post


def two_stage_loss_and_grads(f_pre, f_post, H, R, q):
    """Losses plus exact gradients of L_total for both networks."""
    R_hat, c_pre = neural.forward(f_pre, H, return_cache=True)
    q_t, c_teacher = neural.forward(f_post, R, return_cache=True)
    q_s, c_student = neural.forward(f_post, R_hat, return_cache=True)
    l_pre = neural.mse(R_hat, R)
    l_teacher = neural.mse(q_t, q)
    l_student = neural.mse(q_s, q)

    g_post_t, _ = neural.backward(f_post, c_teacher, neural.mse_grad(q_t, q))
    g_post_s, g_R_hat = neural.backward(f_post, c_student, neural.mse_grad(q_s, q))
    g_post = {k: g_post_t[k] + g_post_s[k] for k in g_post_t}
    g_pre, _ = neural.backward(f_pre, c_pre, neural.mse_grad(R_hat, R) + g_R_hat)
    l_post = l_teacher + l_student
    losses = (l_pre, l_post, l_pre + l_post)
    return losses, g_pre, g_post


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int | None = None  # None: 2048 for >= 100k samples, else 512
    weight_decay: float = 1e-6
    epochs: int = 30
    seed: int = 0
    validation_fraction: float = 0.1
    resample: bool = True

    def to_dict(self):
        return dict(self.__dict__)


class _RetargeterBase(RegressorMixin, BaseEstimator):
    """Shared training loop, prediction and checkpoint plumbing."""

    def _setup(self, X, y):
        X = check_poses(X)
        if self.robot is None:
            raise ValueError("a RobotProfile is required (robot=...)")
        y = check_joint_array(y, self.robot.chain.n, "y")
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        self.n_features_in_ = X.shape[1]
        self.n_joints_ = y.shape[1]
        self.joint_names_ = list(self.robot.chain.joint_names)
        self.limits_ = self.robot.chain.limits.copy()
        self.profile_hash_ = self.robot.source_hash
        return X, y

    def _batches(self, n, phi, tau, rng):
        batch = self.batch_size or default_batch_size(n)
        per_epoch = math.ceil(n / batch)
        if phi is not None and self.resample:
            phi = np.asarray(phi, dtype=float)
            phi_min = float(phi.min())
            tau = float(phi.max()) if tau is None else float(tau)
            for _ in range(per_epoch):
                yield sample_training_batch(phi, batch, rng, phi_min, tau)
        else:
            perm = rng.permutation(n)
            for b in range(per_epoch):
                yield perm[b * batch:(b + 1) * batch]

    def iterations_per_epoch(self, n):
        return math.ceil(n / (self.batch_size or default_batch_size(n)))

    def _fit_loop(self, n, step, eval_set, phi, tau):
        rng = np.random.default_rng([int(self.random_state), 7])
        self.history_ = []
        best = (np.inf, self._snapshot(), 0)
        last_good = self._snapshot()
        iterations = 0
        for epoch in range(self.epochs):
            sums = np.zeros(3)
            count = 0
            for idx in self._batches(n, phi, tau, rng):
                losses = step(idx)
                if not np.all(np.isfinite(losses)):
                    self._restore(last_good)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch + 1}, iteration {iterations}: {losses}", last_good
                    )
                sums += np.asarray(losses) * len(idx)
                count += len(idx)
                iterations += 1
            last_good = self._snapshot()
            means = sums / max(count, 1)
            entry = {"epoch": epoch + 1, "L_pre": float(means[0]), "L_post": float(means[1]), "L_total": float(means[2]), "iterations": iterations}
            if eval_set is not None:
                Xv, yv = eval_set
                q_raw = self.predict_raw(Xv)
                entry["val_link_cm"] = float(np.mean(link_errors(self.robot.chain, self.robot.key_links, q_raw, yv)))
                entry["val_joint_rad"] = joint_error(q_raw, yv)
                score = entry["val_link_cm"]
            else:
                score = entry["L_total"]
            self.history_.append(entry)
            logger.info("epoch %d: %s", epoch + 1, entry)
            if score < best[0]:
                best = (score, self._snapshot(), epoch + 1)
        self._restore(best[1])
        self.best_epoch_ = best[2]
        self.n_iter_ = iterations
        return self

    def predict_raw(self, X):
        """Joint angles without clamping to the limits."""
        raise NotImplementedError

    def predict(self, X):
        """Joint angles clamped to the robot's joint limits."""
        q = self.predict_raw(X)
        if not self.clamp:
            return q
        return np.clip(q, self.limits_[:, 0], self.limits_[:, 1])

    def score(self, X, y, sample_weight=None):
        """Negative mean key-link distance in centimeters (higher is better)."""
        q = self.predict_raw(X)
        return -float(np.mean(link_errors(self.robot.chain, self.robot.key_links, q, y)))

    def _meta(self):
        params = {k: v for k, v in self.get_params().items() if k != "robot"}
        return {
            "format": MODEL_FORMAT,
            "kind": type(self).__name__,
            "params": params,
            "n_features_in": self.n_features_in_,
            "n_joints": self.n_joints_,
            "joint_names": self.joint_names_,
            "limits": self.limits_.tolist(),
            "profile_hash": self.profile_hash_,
            "best_epoch": self.best_epoch_,
            "n_iter": self.n_iter_,
            "history": self.history_,
        }

    def save(self, path):
        doc = self.to_dict()
        with open(path, "w") as f:
            f.write(neural.canonical_json(doc))
        return doc["sha256"]

    def _load_meta(self, doc):
        self.n_features_in_ = doc["n_features_in"]
        self.n_joints_ = doc["n_joints"]
        self.joint_names_ = doc["joint_names"]
        self.limits_ = np.array(doc["limits"], dtype=float).reshape(-1, 2)
        self.profile_hash_ = doc["profile_hash"]
        self.best_epoch_ = doc["best_epoch"]
        self.n_iter_ = doc["n_iter"]
        self.history_ = doc["history"]


class TwoStageRetargeter(_RetargeterBase):
    """Human pose (6k) -> link orientations (6m) -> joint angles (n)."""

    def __init__(
        self,
        robot=None,
        hidden_dim=512,
        learning_rate=1e-4,
        weight_decay=1e-6,
        batch_size=None,
        epochs=30,
        resample=True,
        clamp=True,
        activation="gelu",
        random_state=0,
    ):
        self.robot = robot
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.resample = resample
        self.clamp = clamp
        self.activation = activation
        self.random_state = random_state

    def init_networks(self, n_features, n_orient, n_joints):
        seed = int(self.random_state)
        self.f_pre_ = neural.init_weights((n_features, self.hidden_dim, n_orient), [seed, 21], self.activation)
        self.f_post_ = neural.init_weights((n_orient, self.hidden_dim, n_joints), [seed, 22], self.activation)
        self.f_pre_.seed = self.f_post_.seed = seed
        self.n_features_in_ = n_features  # usable as a random-init baseline
        return self

    def fit(self, X, y, R=None, phi=None, tau=None, eval_set=None):
        """Train on human poses ``X``, joint angles ``y`` and link orientations ``R``.

        ``phi`` (per-sample reconstruction error) switches batch drawing to
        Bernoulli resampling; ``eval_set=(X_val, y_val)`` selects the best
        epoch by validation link error.
        """
        X, y = self._setup(X, y)
        if R is None:
            raise ValueError("two-stage training needs link orientations R")
        R = np.asarray(R, dtype=float).reshape(len(X), -1)
        if R.shape[1] != 6 * self.robot.chain.m:
            raise ValueError(f"R has {R.shape[1]} columns, expected {6 * self.robot.chain.m}")
        self.n_orient_ = R.shape[1]
        self.init_networks(X.shape[1], R.shape[1], y.shape[1])
        opt_pre = neural.AdamState(self.learning_rate, self.weight_decay)
        opt_post = neural.AdamState(self.learning_rate, self.weight_decay)
        self.optimizer_config_ = opt_pre.config()

        def step(idx):
            losses, g_pre, g_post = two_stage_loss_and_grads(self.f_pre_, self.f_post_, X[idx], R[idx], y[idx])
            neural.adam_step(opt_pre, self.f_pre_.params(), g_pre)
            neural.adam_step(opt_post, self.f_post_.params(), g_post)
            return losses

        if eval_set is not None:
            eval_set = (check_poses(eval_set[0], X.shape[1]), check_joint_array(eval_set[1], y.shape[1]))
        return self._fit_loop(len(X), step, eval_set, phi, tau)

    def _snapshot(self):
        return (self.f_pre_.copy(), self.f_post_.copy()) if hasattr(self, "f_pre_") else None

    def _restore(self, snap):
        if snap is not None:
            self.f_pre_, self.f_post_ = snap[0].copy(), snap[1].copy()

    def predict_orientations(self, X):
        check_is_fitted(self, "f_pre_")
        return neural.forward(self.f_pre_, check_poses(X, self.n_features_in_))

    def predict_raw(self, X):
        return neural.forward(self.f_post_, self.predict_orientations(X))

    def predict_pose(self, X):
        """``(R_hat, q_hat)`` with ``q_hat`` clamped to joint limits."""
        R_hat = self.predict_orientations(X)
        q = neural.forward(self.f_post_, R_hat)
        if self.clamp:
            q = np.clip(q, self.limits_[:, 0], self.limits_[:, 1])
        return R_hat, q

    def compute_losses(self, X, y, R):
        check_is_fitted(self, "f_pre_")
        X = check_poses(X, self.n_features_in_)
        return two_stage_losses(self.f_pre_, self.f_post_, X, np.asarray(R, dtype=float).reshape(len(X), -1), np.atleast_2d(y))

    def to_dict(self):
        check_is_fitted(self, "f_pre_")
        doc = self._meta()
        doc["n_orient"] = self.n_orient_
        doc["f_pre"] = neural.net_to_dict(self.f_pre_, neural.AdamState(self.learning_rate, self.weight_decay))
        doc["f_post"] = neural.net_to_dict(self.f_post_, neural.AdamState(self.learning_rate, self.weight_decay))
        doc["sha256"] = neural.content_hash(doc)
        return doc

    @classmethod
    def from_dict(cls, doc, robot=None):
        _check_doc(doc, cls)
        est = cls(robot=robot, **doc["params"])
        est._load_meta(doc)
        est.n_orient_ = doc["n_orient"]
        est.f_pre_ = neural.net_from_dict(doc["f_pre"])
        est.f_post_ = neural.net_from_dict(doc["f_post"])
        return est


class OneStageRetargeter(_RetargeterBase):
    """Single MLP from human pose straight to joint angles (ablation baseline)."""

    def __init__(
        self,
        robot=None,
        hidden_dim=512,
        learning_rate=1e-4,
        weight_decay=1e-6,
        batch_size=None,
        epochs=30,
        resample=True,
        clamp=True,
        activation="gelu",
        random_state=0,
    ):
        self.robot = robot
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.resample = resample
        self.clamp = clamp
        self.activation = activation
        self.random_state = random_state

    def fit(self, X, y, R=None, phi=None, tau=None, eval_set=None):
        X, y = self._setup(X, y)
        seed = int(self.random_state)
        self.net_ = neural.init_weights((X.shape[1], self.hidden_dim, y.shape[1]), [seed, 23], self.activation)
        self.net_.seed = seed
        opt = neural.AdamState(self.learning_rate, self.weight_decay)

        def step(idx):
            q_hat, cache = neural.forward(self.net_, X[idx], return_cache=True)
            loss = neural.mse(q_hat, y[idx])
            grads, _ = neural.backward(self.net_, cache, neural.mse_grad(q_hat, y[idx]))
            neural.adam_step(opt, self.net_.params(), grads)
            return (0.0, loss, loss)

        if eval_set is not None:
            eval_set = (check_poses(eval_set[0], X.shape[1]), check_joint_array(eval_set[1], y.shape[1]))
        return self._fit_loop(len(X), step, eval_set, phi, tau)

    def _snapshot(self):
        return self.net_.copy() if hasattr(self, "net_") else None

    def _restore(self, snap):
        if snap is not None:
            self.net_ = snap.copy()

    def predict_raw(self, X):
        check_is_fitted(self, "net_")
        return neural.forward(self.net_, check_poses(X, self.n_features_in_))

    def to_dict(self):
        check_is_fitted(self, "net_")
        doc = self._meta()
        doc["net"] = neural.net_to_dict(self.net_, neural.AdamState(self.learning_rate, self.weight_decay))
        doc["sha256"] = neural.content_hash(doc)
        return doc

    @classmethod
    def from_dict(cls, doc, robot=None):
        _check_doc(doc, cls)
        est = cls(robot=robot, **doc["params"])
        est._load_meta(doc)
        est.net_ = neural.net_from_dict(doc["net"])
        return est


def _check_doc(doc, cls):
    if doc.get("format") != MODEL_FORMAT or doc.get("kind") != cls.__name__:
        raise ValueError(f"not a {cls.__name__} checkpoint")
    if doc.get("sha256") != neural.content_hash(doc):
        raise ValueError("retarget checkpoint content hash mismatch")


def load_model(path, robot=None):
    with open(path) as f:
        doc = json.load(f)
    kinds = {c.__name__: c for c in (TwoStageRetargeter, OneStageRetargeter)}
    if doc.get("kind") not in kinds:
        raise ValueError(f"{path}: unknown model kind {doc.get('kind')!r}")
    model = kinds[doc["kind"]].from_dict(doc, robot)
    if robot is not None and robot.source_hash and doc["profile_hash"] and robot.source_hash != doc["profile_hash"]:
        raise ValueError("model was trained for a different robot profile")
    return model


def split_by_seed(seeds, validation_fraction=0.1):
    """Boolean validation mask from the per-sample seeds (stable across runs)."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    buckets = int(round(1.0 / validation_fraction)) if validation_fraction > 0 else 0
    if buckets <= 1:
        return np.zeros(len(seeds), dtype=bool)
    return (seeds % np.uint64(buckets)) == 0


def train(dataset, profile, config=None, model_cls=TwoStageRetargeter):
    """Fit a retargeter on a filtered :class:`PairedDataset`.

    Holds out the validation split by seed partition, uses Bernoulli
    resampling when the dataset carries a filter threshold and returns
    ``(model, log)``.
    """
    cfg = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    val = split_by_seed(dataset.seeds, cfg.validation_fraction)
    tr = ~val
    X = dataset.H.reshape(len(dataset), -1)
    R = dataset.R.reshape(len(dataset), -1)
    tau = (dataset.header.get("filter") or {}).get("tau")
    batch = cfg.batch_size or default_batch_size(int(tr.sum()))
    model = model_cls(
        robot=profile,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        batch_size=batch,
        epochs=cfg.epochs,
        resample=cfg.resample,
        random_state=cfg.seed,
    )
    eval_set = (X[val], dataset.q[val]) if val.any() else None
    phi = dataset.phi[tr] if (cfg.resample and tau is not None) else None
    model.fit(X[tr], dataset.q[tr], R=R[tr], phi=phi, tau=tau, eval_set=eval_set)
    log = {
        "config": cfg.to_dict(),
        "batch_size": batch,
        "n_train": int(tr.sum()),
        "n_val": int(val.sum()),
        "iterations": model.n_iter_,
        "best_epoch": model.best_epoch_,
        "history": model.history_,
    }
    return model, log


def write_pose_stream(path, poses, joint_names):
    poses = np.asarray(poses, dtype=float)
    with open(path, "w") as f:
        f.write(json.dumps({"format": STREAM_FORMAT, "k": len(joint_names), "joints": list(joint_names)}) + "\n")
        for h in poses.reshape(len(poses), -1):
            f.write(json.dumps({"H": h.tolist()}) + "\n")


def read_motion(path):
    """Returns (header, q frames (T, n))."""
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != MOTION_FORMAT:
            raise ValueError(f"{path}: not a motion file")
        rows = [json.loads(line)["q"] for line in f if line.strip()]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header["joint_names"]))


def retarget_stream(model, in_path, out_path):
    """Retarget every frame of a human-pose stream file into a motion file.

    Frames are independent. Returns the number of frames written.
    """
    with open(in_path) as f:
        first = f.readline()
        if not first.strip():
            frames = []
            header = None
        else:
            header = json.loads(first)
            if header.get("format") != STREAM_FORMAT:
                raise ValueError(f"{in_path}: not a human-pose stream")
            if 6 * header["k"] != model.n_features_in_:
                raise ValueError(f"stream has k={header['k']} joints, model expects {model.n_features_in_ // 6}")
            frames = []
            for t, line in enumerate(f):
                if not line.strip():
                    continue
                try:
                    h = np.asarray(json.loads(line)["H"], dtype=float).ravel()
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"frame {t}: malformed record ({exc})") from None
                if h.shape != (model.n_features_in_,) or not np.all(np.isfinite(h)):
                    raise ValueError(f"frame {t}: expected {model.n_features_in_} finite values, got {h.size}")
                frames.append(h)
    with open(out_path, "w") as out:
        out.write(json.dumps({"format": MOTION_FORMAT, "joint_names": model.joint_names_, "count": len(frames)}) + "\n")
        if frames:
            for q in model.predict(np.stack(frames)):
                out.write(json.dumps({"q": q.tolist()}) + "\n")
    return len(frames)
