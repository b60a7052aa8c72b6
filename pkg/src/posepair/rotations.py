"""Rotation representations: matrices, axis-angle and the continuous 6D form.

6D layout: the first two COLUMNS of the rotation matrix, concatenated
``(a1, a2)``. Every function accepts arbitrary leading batch dimensions.
"""
from __future__ import annotations

import numpy as np

DEGENERATE_TOL = 1e-12
ORTHONORMAL_TOL = 1e-6


class DegenerateSixDError(ValueError):
    """A 6D vector whose columns cannot be orthonormalised."""


class NotARotationError(ValueError):
    """A 3x3 matrix that is not a proper rotation."""


def _check_rotmat(M):
    eye = np.eye(3)
    gram = np.swapaxes(M, -1, -2) @ M
    if not np.all(np.abs(gram - eye) <= ORTHONORMAL_TOL):
        raise NotARotationError("matrix is not orthonormal (|M^T M - I| > 1e-6)")
    if not np.all(np.abs(np.linalg.det(M) - 1.0) <= ORTHONORMAL_TOL):
        raise NotARotationError("matrix has determinant != +1")


def rotmat_to_sixd(M, validate=True):
    """Drop the third column of ``M``: shape (..., 3, 3) -> (..., 6)."""
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3), got {M.shape}")
    if validate:
        _check_rotmat(M)
    return np.concatenate([M[..., :, 0], M[..., :, 1]], axis=-1)


def sixd_to_rotmat(v):
    """Gram-Schmidt a 6D vector (..., 6) into a rotation matrix (..., 3, 3).

    Non-orthonormal inputs are valid; a zero first column or a second
    column parallel to the first raises :class:`DegenerateSixDError`.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 6:
        raise ValueError(f"expected (..., 6), got {v.shape}")
    a1 = v[..., 0:3]
    a2 = v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_TOL) or not np.all(np.isfinite(v)):
        raise DegenerateSixDError("first 6D column is zero or non-finite")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERATE_TOL):
        raise DegenerateSixDError("second 6D column is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def canonicalize_sixd(v):
    """Project arbitrary 6D vectors onto the 6D image of proper rotations."""
    return rotmat_to_sixd(sixd_to_rotmat(v), validate=False)


def _skew(w):
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def axis_angle_to_rotmat(a):
    """Rodrigues' formula on rotation vectors (..., 3) -> (..., 3, 3)."""
    a = np.asarray(a, dtype=float)
    theta = np.linalg.norm(a, axis=-1)[..., None, None]
    K = _skew(a)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # Taylor terms near zero keep the result exact to double precision.
    s = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    c = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + s * K + c * (K @ K)


def rotmat_to_axis_angle(M):
    """Inverse of :func:`axis_angle_to_rotmat`; angle canonicalised to [0, pi]."""
    M = np.asarray(M, dtype=float)
    batch = M.shape[:-2]
    flat = M.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 3))
    for i, R in enumerate(flat):
        out[i] = _single_rotmat_to_axis_angle(R)
    return out.reshape(batch + (3,))


def _single_rotmat_to_axis_angle(R):
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(w)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta > 1e-4:
        return w * (theta / (2.0 * sin_t))
    # Near pi the antisymmetric part vanishes; the symmetric part is
    # (1 - cos) * axis axis^T exactly.
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / np.linalg.norm(B[:, col])
    if np.dot(axis, w) < 0:
        axis = -axis
    return axis * theta


def periodic_angle_diff(a, b):
    """Absolute angular difference wrapped to [0, pi]."""
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), 2.0 * np.pi)
    return np.minimum(d, 2.0 * np.pi - d)


def rpy_to_rotmat(rpy):
    """URDF roll-pitch-yaw (fixed axes X, Y, Z): R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = (float(x) for x in rpy)
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )
