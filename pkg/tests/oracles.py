"""Independent reference implementations used as test oracles."""

import numpy as np
from scipy.spatial.transform import Rotation

from mhavio import geometry


def random_trajectory(F: int, seed: int, step: float = 1.0) -> np.ndarray:
    """Smooth-ish random drive: jittered step lengths, slowly varying heading and small pitch/roll."""
    rng = np.random.default_rng(seed)
    poses = np.tile(np.eye(4), (F, 1, 1))
    yaw = pitch = roll = 0.0
    pos = np.zeros(3)
    for k in range(1, F):
        yaw += rng.normal(0, 0.03)
        pitch = 0.9 * pitch + rng.normal(0, 0.005)
        roll = 0.9 * roll + rng.normal(0, 0.005)
        R = geometry.euler_to_matrix(yaw, pitch, roll)
        pos = pos + R @ np.array([step * rng.uniform(0.8, 1.2), 0.0, 0.0])
        poses[k, :3, :3] = R
        poses[k, :3, 3] = pos
    return poses


def perturb(poses: np.ndarray, seed: int, t_std: float = 0.02, r_std: float = 0.002) -> np.ndarray:
    """Drifted estimate: noisy relative steps recomposed from the first pose."""
    rng = np.random.default_rng(seed)
    rel = geometry.relative_sequence(poses)
    rel = rel + np.concatenate([rng.normal(0, t_std, (len(rel), 3)), rng.normal(0, r_std, (len(rel), 3))], axis=1)
    return geometry.compose_trajectory(rel, poses[0])


def brute_force_metric(pred: np.ndarray, gt: np.ndarray, lengths=range(100, 900, 100)):
    """Direct double loop: walk forward from every anchor summing segment lengths.

    Returns ``(t_rel, r_rel, {L: count})`` with the same aggregation as the
    library (per-length RMSE, then the mean over non-empty lengths).
    """
    F = len(gt)
    lengths = list(lengths)
    t_sq = {L: [] for L in lengths}
    r_sq = {L: [] for L in lengths}
    for i in range(F):
        todo = list(lengths)
        d = 0.0
        for j in range(i + 1, F):
            d += float(np.sqrt(np.sum((gt[j, :3, 3] - gt[j - 1, :3, 3]) ** 2)))
            while todo and d >= todo[0]:
                L = todo.pop(0)
                d_gt = np.linalg.inv(gt[i]) @ gt[j]
                d_pred = np.linalg.inv(pred[i]) @ pred[j]
                err = np.linalg.inv(d_pred) @ d_gt
                angle = Rotation.from_matrix(err[:3, :3]).magnitude()
                t_sq[L].append((np.sqrt(np.sum(err[:3, 3] ** 2)) / L) ** 2)
                r_sq[L].append((angle / L) ** 2)
            if not todo:
                break
    used = [L for L in lengths if t_sq[L]]
    if not used:
        return 0.0, 0.0, {}
    t = np.mean([100 * np.sqrt(np.mean(t_sq[L])) for L in used])
    r = np.mean([100 * np.degrees(np.sqrt(np.mean(r_sq[L]))) for L in used])
    return float(t), float(r), {L: len(t_sq[L]) for L in used}


def straight_line(F: int, step: float = 1.0, scale: float = 1.0) -> np.ndarray:
    poses = np.tile(np.eye(4), (F, 1, 1))
    poses[:, 0, 3] = scale * step * np.arange(F)
    return poses
