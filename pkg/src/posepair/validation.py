"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_poses(X, n_features=None, name="X"):
    """Coerce poses to a finite (N, 6k) float array.

    Accepts (N, 6k), (N, k, 6) or a single pose (6k,) / (k, 6).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    elif X.ndim == 2 and X.shape[1] == 6 and n_features not in (None, 6):
        X = X.reshape(1, -1)
    elif X.ndim == 3:
        X = X.reshape(len(X), -1)
    X = check_array(X, dtype=float, ensure_2d=True, input_name=name, ensure_min_samples=1)
    if X.shape[1] % 6:
        raise ValueError(f"{name} must hold 6D rotations: width {X.shape[1]} is not a multiple of 6")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_joint_array(q, n_joints, name="q"):
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[None]
    q = check_array(q, dtype=float, input_name=name)
    if q.shape[1] != n_joints:
        raise ValueError(f"{name} has {q.shape[1]} joints, expected {n_joints}")
    return q
