"""One-hidden-layer MLPs with exact backprop and Adam, in plain numpy.

GELU is the tanh approximation
``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``; the constants are
part of the checkpoint contract.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715
PARAM_NAMES = ("W1", "b1", "W2", "b2")
CHECKPOINT_FORMAT = "posepair.mlp/1"


def gelu(x):
    u = x * x
    u *= GELU_A * GELU_C
    u += GELU_C
    u *= x
    np.tanh(u, out=u)
    u += 1.0
    u *= x
    u *= 0.5
    return u


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_A * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x2)


@dataclass
class Mlp:
    """``y = W2 act(W1 x + b1) + b2`` applied row-wise to (N, input_dim)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"
    seed: int | None = None

    def __post_init__(self):
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        h, i = self.W1.shape
        o, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (o,):
            raise ValueError("inconsistent MLP parameter shapes")

    @property
    def input_dim(self):
        return self.W1.shape[1]

    @property
    def hidden_dim(self):
        return self.W1.shape[0]

    @property
    def output_dim(self):
        return self.W2.shape[0]

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self):
        return Mlp(*(p.copy() for p in (self.W1, self.b1, self.W2, self.b2)), self.activation, self.seed)


def init_weights(dims, seed, activation="gelu"):
    """He-uniform weights (variance 2/fan_in), zero biases."""
    n_in, n_hidden, n_out = dims
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / n_in)
    lim2 = np.sqrt(6.0 / n_hidden)
    W1 = rng.uniform(-lim1, lim1, size=(n_hidden, n_in))
    W2 = rng.uniform(-lim2, lim2, size=(n_out, n_hidden))
    return Mlp(W1, np.zeros(n_hidden), W2, np.zeros(n_out), activation, seed)


def _act(net, a):
    return gelu(a) if net.activation == "gelu" else a


def forward(net, x, return_cache=False):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.shape[-1] != net.input_dim:
        raise ValueError(f"input has {X.shape[-1]} features, network expects {net.input_dim}")
    a = X @ net.W1.T + net.b1
    h = _act(net, a)
    y = h @ net.W2.T + net.b2
    if single:
        y = y[0]
    if return_cache:
        return y, (X, a, h, single)
    return y


def backward(net, cache, grad_y):
    """Gradients of ``sum(grad_y * y)`` w.r.t. parameters and input."""
    X, a, h, single = cache
    G = np.asarray(grad_y, dtype=float)
    if single:
        G = G[None]
    gW2 = G.T @ h
    gb2 = G.sum(axis=0)
    gh = G @ net.W2
    ga = gh * gelu_grad(a) if net.activation == "gelu" else gh
    gW1 = ga.T @ X
    gb1 = ga.sum(axis=0)
    gx = ga @ net.W1
    if single:
        gx = gx[0]
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}, gx


def mse(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.mean(d * d))


def mse_grad(pred, target):
    """d mse(pred, target) / d pred."""
    return 2.0 * (pred - target) / pred.size


@dataclass
class AdamState:
    """Adam moments keyed by parameter name; L2 decay is added to the gradient."""

    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def config(self):
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "decay_mode": "l2_in_gradient",
        }


def adam_step(state, params, grads):
    """In-place Adam update of ``params`` (dict of arrays); returns ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def net_to_dict(net, optimizer=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "output_dim": net.output_dim,
        "activation": net.activation,
        "gelu": "tanh" if net.activation == "gelu" else None,
        "seed": net.seed,
        "weights": {k: np.asarray(v).ravel().tolist() for k, v in net.params().items()},
    }
    if optimizer is not None:
        doc["optimizer"] = optimizer.config()
    doc["sha256"] = content_hash(doc)
    return doc


def net_from_dict(doc, verify=True):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    if verify and doc.get("sha256") != content_hash(doc):
        raise ValueError("checkpoint content hash mismatch")
    i, h, o = doc["input_dim"], doc["hidden_dim"], doc["output_dim"]
    w = doc["weights"]
    return Mlp(
        np.array(w["W1"], dtype=float).reshape(h, i),
        np.array(w["b1"], dtype=float),
        np.array(w["W2"], dtype=float).reshape(o, h),
        np.array(w["b2"], dtype=float),
        doc["activation"],
        doc.get("seed"),
    )


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(doc):
    body = {k: v for k, v in doc.items() if k != "sha256"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()
