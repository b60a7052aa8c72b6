"""Retargeting error metrics: periodic joint error and key-link distance."""
from __future__ import annotations

import numpy as np

from .kinematics import link_transforms
from .rotations import periodic_angle_diff


def joint_errors(q_pred, q_true):
    """Per-sample mean periodic joint difference (radians)."""
    d = periodic_angle_diff(np.atleast_2d(q_pred), np.atleast_2d(q_true))
    return d.mean(axis=-1)


def joint_error(q_pred, q_true):
    """Mean absolute joint difference modulo 2*pi, in radians."""
    return float(np.mean(joint_errors(q_pred, q_true)))


def link_errors(chain, key_links, q_pred, q_true):
    """Per-sample mean Euclidean distance over ``key_links``, in centimeters."""
    idx = [chain.link_index(name) if isinstance(name, str) else int(name) for name in key_links]
    _, p_pred = link_transforms(chain, np.atleast_2d(q_pred))
    _, p_true = link_transforms(chain, np.atleast_2d(q_true))
    d = np.linalg.norm(p_pred[:, idx] - p_true[:, idx], axis=-1)
    return 100.0 * d.mean(axis=-1)


def link_error(chain, profile, q_pred, q_true):
    """Mean key-link distance (cm) after FK of both joint vectors."""
    return float(np.mean(link_errors(chain, profile.key_links, q_pred, q_true)))
