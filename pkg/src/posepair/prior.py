"""Variational pose prior: training, denoising reconstruction and latent IK."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import neural
from .body import human_fk
from .rotations import canonicalize_sixd, sixd_to_rotmat
from .validation import check_poses

PRIOR_FORMAT = "posepair.prior/1"


class PosePrior(TransformerMixin, BaseEstimator):
    """VAE over flattened 6D human poses.

    ``transform`` returns the encoder mean, ``inverse_transform`` decodes
    latents to orthonormalised poses, and ``reconstruct`` is the
    deterministic encode-mean-decode denoiser.
    """

    def __init__(
        self,
        latent_dim=32,
        hidden_dim=512,
        beta=0.005,
        learning_rate=1e-3,
        weight_decay=0.0,
        epochs=40,
        batch_size=128,
        validation_fraction=0.1,
        activation="gelu",
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.beta = beta
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.activation = activation
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_poses(X)
        n, dim = X.shape
        d = self.latent_dim
        if n < 10 * d:
            raise ValueError(f"corpus of {n} poses is too small for latent_dim={d} (need >= {10 * d})")
        seed = int(self.random_state)
        rng = np.random.default_rng([seed, 1])
        order = rng.permutation(n)
        n_val = int(round(self.validation_fraction * n))
        val, train = X[order[:n_val]], X[order[n_val:]]

        enc = neural.init_weights((dim, self.hidden_dim, 2 * d), [seed, 11], self.activation)
        dec = neural.init_weights((d, self.hidden_dim, dim), [seed, 12], self.activation)
        enc.seed, dec.seed = seed, seed
        opt_e = neural.AdamState(self.learning_rate, self.weight_decay)
        opt_d = neural.AdamState(self.learning_rate, self.weight_decay)

        self.n_features_in_ = dim
        self.history_ = []
        best = (np.inf, None, None, -1)
        for epoch in range(self.epochs):
            perm = rng.permutation(len(train))
            sums = np.zeros(2)
            for start in range(0, len(train), self.batch_size):
                xb = train[perm[start:start + self.batch_size]]
                eps = rng.standard_normal((len(xb), d))
                recon, kl, ge, gd = _vae_loss_and_grads(enc, dec, xb, eps, self.beta)
                if not (np.isfinite(recon) and np.isfinite(kl)):
                    raise FloatingPointError(
                        f"non-finite prior loss at epoch {epoch}, batch {start // self.batch_size}: "
                        f"recon={recon}, kl={kl}"
                    )
                neural.adam_step(opt_e, enc.params(), ge)
                neural.adam_step(opt_d, dec.params(), gd)
                sums += (recon * len(xb), kl * len(xb))
            train_recon, train_kl = sums / len(train)
            val_recon = _recon_mse(enc, dec, val) if n_val else train_recon
            self.history_.append(
                {"epoch": epoch + 1, "train_recon": train_recon, "train_kl": train_kl, "val_recon": val_recon}
            )
            if val_recon < best[0]:
                best = (val_recon, enc.copy(), dec.copy(), epoch + 1)
        self.encoder_, self.decoder_ = best[1], best[2]
        self.best_epoch_ = best[3]
        self.train_mse_ = _recon_mse(self.encoder_, self.decoder_, train)
        self.optimizer_config_ = opt_e.config()
        return self

    @property
    def n_joints(self):
        return self.n_features_in_ // 6

    def encode(self, X):
        """Encoder mean and log-variance."""
        check_is_fitted(self, "encoder_")
        out = neural.forward(self.encoder_, check_poses(X, self.n_features_in_))
        d = self.latent_dim
        return out[:, :d], out[:, d:]

    def transform(self, X):
        return self.encode(X)[0]

    def decode_raw(self, Z):
        check_is_fitted(self, "decoder_")
        return neural.forward(self.decoder_, np.atleast_2d(np.asarray(Z, dtype=float)))

    def inverse_transform(self, Z):
        raw = self.decode_raw(Z)
        return canonicalize_sixd(raw.reshape(len(raw), -1, 6)).reshape(len(raw), -1)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def reconstruction_error(self, X):
        """Per-pose error: mean over joints of the squared 6D difference."""
        X = check_poses(X, self.n_features_in_)
        Xc = canonicalize_sixd(X.reshape(len(X), -1, 6)).reshape(len(X), -1)
        return pose_error(Xc, self.reconstruct(Xc))

    def to_dict(self):
        check_is_fitted(self, "encoder_")
        doc = {
            "format": PRIOR_FORMAT,
            "params": self.get_params(),
            "n_features_in": self.n_features_in_,
            "best_epoch": self.best_epoch_,
            "train_mse": self.train_mse_,
            "history": self.history_,
            "encoder": neural.net_to_dict(self.encoder_, neural.AdamState(**_adam_kwargs(self.optimizer_config_))),
            "decoder": neural.net_to_dict(self.decoder_),
        }
        doc["sha256"] = neural.content_hash(doc)
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != PRIOR_FORMAT:
            raise ValueError("not a pose-prior checkpoint")
        if doc.get("sha256") != neural.content_hash(doc):
            raise ValueError("prior checkpoint content hash mismatch")
        est = cls(**doc["params"])
        est.n_features_in_ = doc["n_features_in"]
        est.best_epoch_ = doc["best_epoch"]
        est.train_mse_ = doc["train_mse"]
        est.history_ = doc["history"]
        est.encoder_ = neural.net_from_dict(doc["encoder"])
        est.decoder_ = neural.net_from_dict(doc["decoder"])
        est.optimizer_config_ = doc["encoder"].get("optimizer", {})
        return est

    def save(self, path):
        doc = self.to_dict()
        with open(path, "w") as f:
            f.write(neural.canonical_json(doc))
        return doc["sha256"]

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @property
    def checksum(self):
        cached = getattr(self, "_checksum", None)
        if cached is None or cached[0] is not self.decoder_:
            cached = (self.decoder_, self.to_dict()["sha256"])
            self._checksum = cached
        return cached[1]


def _adam_kwargs(cfg):
    return {k: cfg[k] for k in ("learning_rate", "weight_decay", "beta1", "beta2", "eps") if k in cfg}


def pose_error(H, H_tilde):
    """Mean over joints of the squared 6D difference, per pose."""
    H = np.asarray(H, dtype=float)
    H_tilde = np.asarray(H_tilde, dtype=float)
    d = (H - H_tilde).reshape(len(H), -1, 6)
    return np.mean(np.sum(d * d, axis=-1), axis=-1)


def kl_divergence(mu, logvar):
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


def _recon_mse(enc, dec, X):
    if len(X) == 0:
        return float("nan")
    d = dec.input_dim
    mu = neural.forward(enc, X)[:, :d]
    return neural.mse(neural.forward(dec, mu), X)


def _vae_loss_and_grads(enc, dec, X, eps, beta):
    """Returns (recon MSE, mean KL, encoder grads, decoder grads)."""
    B = len(X)
    d = dec.input_dim
    out, ce = neural.forward(enc, X, return_cache=True)
    mu, logvar = out[:, :d], out[:, d:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    xr, cd = neural.forward(dec, z, return_cache=True)
    recon = neural.mse(xr, X)
    kl = float(np.mean(kl_divergence(mu, logvar)))

    gd, gz = neural.backward(dec, cd, neural.mse_grad(xr, X))
    g_mu = gz + beta * mu / B
    g_logvar = gz * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / B
    ge, _ = neural.backward(enc, ce, np.concatenate([g_mu, g_logvar], axis=1))
    return recon, kl, ge, gd


def vae_objective(enc, dec, X, eps, beta):
    """Scalar training loss for a fixed noise draw (used by gradient checks)."""
    d = dec.input_dim
    out = neural.forward(enc, X)
    mu, logvar = out[:, :d], out[:, d:]
    z = mu + np.exp(0.5 * logvar) * eps
    return neural.mse(neural.forward(dec, z), X) + beta * float(np.mean(kl_divergence(mu, logvar)))


@dataclass
class IKConfig:
    learning_rate: float = 0.05
    max_iters: int = 300
    latent_reg: float = 0.01
    fd_step: float = 1e-4
    converge_residual: float = 0.03  # mean per-target residual, meters
    patience: int = 20
    min_rel_improvement: float = 1e-4
    # "output": central differences over decoder outputs through human FK,
    # chained with exact decoder backprop. "latent": central differences
    # over z directly (2d + 1 decoder passes per step).
    gradient: str = "output"

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class IKResult:
    pose: np.ndarray  # (k, 6)
    z: np.ndarray
    objective: float
    initial_objective: float
    residuals: np.ndarray  # per target, meters
    iterations: int
    converged: bool = False

    @property
    def mean_residual(self):
        return float(np.mean(self.residuals))


class _LatentFK:
    """Decoder + human FK restricted to what the target joints depend on."""

    def __init__(self, prior, body, joints):
        self.body = body
        self.joints = [int(j) for j in joints]
        need_pos = set(self.joints)
        for j in self.joints:
            need_pos.update(body.ancestors(j))
        self.pos_order = sorted(need_pos)
        self.rot_joints = sorted({a for j in self.joints for a in body.ancestors(j)})
        self.rot_slot = {j: i for i, j in enumerate(self.rot_joints)}
        cols = [c for j in self.rot_joints for c in range(6 * j, 6 * j + 6)]
        self.dec = prior.decoder_
        self.W2 = self.dec.W2[cols]
        self.b2 = self.dec.b2[cols]
        self.out_dim = len(cols)

    def hidden_pre(self, Z):
        return Z @ self.dec.W1.T + self.dec.b1

    def outputs_from_pre(self, A):
        h = neural.gelu(A) if self.dec.activation == "gelu" else A
        return h @ self.W2.T + self.b2

    def positions(self, out):
        """Target positions (M, T, 3) from the restricted decoder outputs (M, out_dim)."""
        M = len(out)
        body = self.body
        rots = sixd_to_rotmat(out.reshape(M, len(self.rot_joints), 6)) if self.rot_joints else None
        pos, glob = {}, {}
        for j in self.pos_order:
            p = body.parents[j]
            G = None if p < 0 else glob[p]
            pos[j] = np.broadcast_to(body.offsets[j], (M, 3)) if p < 0 else pos[p] + G @ body.offsets[j]
            if j in self.rot_slot:
                R = rots[:, self.rot_slot[j]]
                glob[j] = R if G is None else G @ R
        return np.stack([pos[j] for j in self.joints], axis=1)


def _fit_error(P, targets, w):
    return np.sum((P - targets) ** 2, axis=-1) @ w


def _latent_fd_grad(fk, Z, targets, w, cfg):
    B, d = Z.shape
    h = cfg.fd_step
    W1 = fk.dec.W1
    delta = np.concatenate([np.zeros((1, W1.shape[0])), h * W1.T, -h * W1.T], axis=0)
    A = (fk.hidden_pre(Z)[:, None, :] + delta[None]).reshape(-1, W1.shape[0])
    P = fk.positions(fk.outputs_from_pre(A)).reshape(B, 2 * d + 1, -1, 3)
    zz = np.concatenate([Z[:, None], Z[:, None] + h * np.eye(d), Z[:, None] - h * np.eye(d)], axis=1)
    obj = _fit_error(P, targets[:, None], w) + cfg.latent_reg * np.sum(zz**2, axis=-1)
    return obj[:, 0], (obj[:, 1:d + 1] - obj[:, d + 1:]) / (2.0 * h)


def _output_fd_grad(fk, Z, targets, w, cfg):
    B, d = Z.shape
    h = cfg.fd_step
    D = fk.out_dim
    A = fk.hidden_pre(Z)
    out = fk.outputs_from_pre(A)
    eye = h * np.eye(D)
    pert = np.concatenate([out[:, None], out[:, None] + eye, out[:, None] - eye], axis=1)
    P = fk.positions(pert.reshape(-1, D)).reshape(B, 2 * D + 1, -1, 3)
    fit = _fit_error(P, targets[:, None], w)
    g_out = (fit[:, 1:D + 1] - fit[:, D + 1:]) / (2.0 * h)
    gh = g_out @ fk.W2
    ga = gh * neural.gelu_grad(A) if fk.dec.activation == "gelu" else gh
    reg = cfg.latent_reg * np.sum(Z**2, axis=-1)
    return fit[:, 0] + reg, ga @ fk.dec.W1 + 2.0 * cfg.latent_reg * Z


def ik_solve_batch(prior, body, joints, targets, weights=None, config=None):
    """Latent-space IK for a batch of target sets sharing the same joints.

    ``targets`` is (B, T, 3); returns a list of :class:`IKResult`. Each
    sample runs its own Adam state from ``z = 0`` and stops after
    ``patience`` steps without relative improvement; the lowest-objective
    iterate is returned.
    """
    check_is_fitted(prior, "decoder_")
    cfg = config or IKConfig()
    if cfg.gradient not in ("output", "latent"):
        raise ValueError(f"unknown IK gradient mode {cfg.gradient!r}")
    grad_fn = _output_fd_grad if cfg.gradient == "output" else _latent_fd_grad
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 2:
        targets = targets[None]
    B, T, _ = targets.shape
    if T < 1:
        raise ValueError("IK needs at least one target")
    w = np.ones(T) if weights is None else np.asarray(weights, dtype=float)
    fk = _LatentFK(prior, body, joints)
    d = prior.latent_dim

    Z = np.zeros((B, d))
    m = np.zeros((B, d))
    v = np.zeros((B, d))
    best_obj = np.full(B, np.inf)
    best_z = Z.copy()
    init_obj = np.zeros(B)
    hist = [[] for _ in range(B)]
    active = np.ones(B, dtype=bool)
    b1, b2, eps = 0.9, 0.999, 1e-8

    for it in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        f0, grad = grad_fn(fk, Z[idx], targets[idx], w, cfg)
        for r, i in enumerate(idx):
            if it == 0:
                init_obj[i] = f0[r]
            if f0[r] < best_obj[i]:
                best_obj[i] = f0[r]
                best_z[i] = Z[i]
            hist[i].append(f0[r])
            n = len(hist[i])
            if n > cfg.max_iters:
                active[i] = False
            elif n > cfg.patience:
                old = hist[i][-cfg.patience - 1]
                if old - f0[r] <= cfg.min_rel_improvement * abs(old) + 1e-15:
                    active[i] = False
        step = np.flatnonzero(active[idx])
        ids, g = idx[step], grad[step]
        t = it + 1
        m[ids] = b1 * m[ids] + (1 - b1) * g
        v[ids] = b2 * v[ids] + (1 - b2) * g * g
        Z[ids] -= cfg.learning_rate * (m[ids] / (1 - b1**t)) / (np.sqrt(v[ids] / (1 - b2**t)) + eps)

    poses = prior.inverse_transform(best_z).reshape(B, body.k, 6)
    P = fk.positions(fk.outputs_from_pre(fk.hidden_pre(best_z)))
    res = np.linalg.norm(P - targets, axis=-1)
    return [
        IKResult(
            pose=poses[i],
            z=best_z[i].copy(),
            objective=float(best_obj[i]),
            initial_objective=float(init_obj[i]),
            residuals=res[i],
            iterations=len(hist[i]) - 1,
            converged=bool(res[i].mean() <= cfg.converge_residual),
        )
        for i in range(B)
    ]


def ik_solve(prior, body, targets, config=None):
    """IK for one target list of ``(joint, position, weight)`` tuples."""
    if len(targets) == 0:
        raise ValueError("IK needs at least one target")
    joints = [body.joint_index(t[0]) for t in targets]
    pos = np.array([t[1] for t in targets], dtype=float)
    weights = np.array([t[2] if len(t) > 2 else 1.0 for t in targets], dtype=float)
    return ik_solve_batch(prior, body, joints, pos[None], weights, config)[0]


def ik_objective(prior, body, joints, targets, weights, z, latent_reg):
    """Reference objective via the full decoder and full human FK."""
    pose = prior.decode_raw(np.asarray(z)[None])[0].reshape(body.k, 6)
    pos = human_fk(body, pose)[np.asarray(joints)]
    return float(np.sum(np.asarray(weights) * np.sum((pos - targets) ** 2, axis=-1)) + latent_reg * np.dot(z, z))


