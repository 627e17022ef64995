"""Rigid transforms and the 6-D relative pose parameterization.

A :data:`Pose6D` is the array ``(tx, ty, tz, yaw, pitch, roll)``.  Angles use
the Z-Y-X convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  Relative poses
are expressed in the frame of the earlier pose: ``T_rel = inv(T_prev) @ T_next``.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

EULER_CONVENTION = "ZYX"  # yaw-pitch-roll, intrinsic
GIMBAL_TOL = 1e-6
ORTHO_TOL = 1e-3


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Return (yaw, pitch, roll) of a rotation matrix.

    Within ``GIMBAL_TOL`` of pitch = +-pi/2, yaw and roll are not separable;
    roll is then fixed to 0 and a warning is logged.
    """
    pitch = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    if abs(abs(pitch) - np.pi / 2) < GIMBAL_TOL:
        log.warning("gimbal lock (pitch=%.9f); roll set to 0", pitch)
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        yaw = np.arctan2(R[1, 0], R[0, 0])
        roll = np.arctan2(R[2, 1], R[2, 2])
    return wrap_angle(np.array([yaw, pitch, roll]))


def pose6d_to_matrix(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    T = np.eye(4)
    T[:3, :3] = euler_to_matrix(pose[3], pose[4], pose[5])
    T[:3, 3] = pose[:3]
    return T


def matrix_to_pose6d(T: np.ndarray) -> np.ndarray:
    return np.concatenate([T[:3, 3], matrix_to_euler(T[:3, :3])])


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def check_rigid(T: np.ndarray, tol: float = ORTHO_TOL, where: str = "") -> None:
    R = T[:3, :3]
    dev = np.abs(R.T @ R - np.eye(3)).max()
    if not np.isfinite(dev) or dev > tol or np.linalg.det(R) <= 0:
        raise FormatError(f"non-rigid rotation block{where}: orthogonality deviation {dev:.3g}")


def absolute_to_relative(p_prev: np.ndarray, p_next: np.ndarray) -> np.ndarray:
    """Pose6D of ``p_next`` seen from ``p_prev``."""
    return matrix_to_pose6d(invert_rigid(p_prev) @ p_next)


def relative_to_absolute(p_prev: np.ndarray, rel) -> np.ndarray:
    """Inverse of :func:`absolute_to_relative`: the next absolute transform."""
    return p_prev @ pose6d_to_matrix(rel)


def compose_trajectory(relatives: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
    """Fold (K, 6) relative poses onto ``start``; returns (K+1, 4, 4)."""
    relatives = np.asarray(relatives, dtype=np.float64).reshape(-1, 6)
    out = np.empty((len(relatives) + 1, 4, 4))
    out[0] = np.eye(4) if start is None else start
    for k, rel in enumerate(relatives):
        out[k + 1] = relative_to_absolute(out[k], rel)
    return out


def relative_sequence(poses: np.ndarray) -> np.ndarray:
    """(F, 4, 4) absolute poses -> (F-1, 6) per-step relative poses."""
    return np.array([absolute_to_relative(poses[k], poses[k + 1]) for k in range(len(poses) - 1)]).reshape(-1, 6)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of the axis-angle form of R (radians), stable near 0 and pi."""
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(R) - 1.0)))


def random_rigid(rng: np.random.Generator, max_translation: float = 10.0) -> np.ndarray:
    """Uniformly random rotation (via unit quaternion) plus uniform translation."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = rng.uniform(-max_translation, max_translation, size=3)
    return T
