"""KITTI-style relative trajectory errors and uncertainty/error summaries.

For every anchor frame and every length L in 100, 200, ..., 800 m, the span
ends at the first frame whose ground-truth path distance from the anchor is
at least L.  The residual transform ``inv(pred_span) @ gt_span`` gives a
translation error (normalized by L) and a rotation angle (per 100 m).  Each
length aggregates by RMSE over its anchors; ``t_rel`` (%) and ``r_rel``
(deg / 100 m) are the means over lengths that had at least one span.

CSV schemas (header row always written):

* metrics:     ``length,t_rel,r_rel,count``
* trajectory:  ``frame,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z`` plus
  ``var_x,var_y,var_z`` when position variances are present
* box bins:    ``component,bin,error_lo,error_hi,count,sigma_min,sigma_q1,sigma_median,sigma_q3,sigma_max``
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .geometry import compose_trajectory, relative_sequence, wrap_angle

LENGTHS = tuple(range(100, 900, 100))
COMPONENTS = ("tx", "ty", "tz", "yaw", "pitch", "roll")
METRIC_COLUMNS = ["length", "t_rel", "r_rel", "count"]
TRAJECTORY_COLUMNS = ["frame", "gt_x", "gt_y", "gt_z", "pred_x", "pred_y", "pred_z"]
TRAJECTORY_VAR_COLUMNS = ["var_x", "var_y", "var_z"]
BOX_COLUMNS = ["component", "bin", "error_lo", "error_hi", "count",
               "sigma_min", "sigma_q1", "sigma_median", "sigma_q3", "sigma_max"]


@dataclass
class TrajectoryEstimate:
    poses: np.ndarray                         # (F, 4, 4) absolute
    relatives: np.ndarray | None = None       # (F-1, 6) per-step poses
    variance: np.ndarray | None = None        # (F-1, 6) per-step predictive variance
    position_variance: np.ndarray | None = None  # (F, 3) variance of absolute positions

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        F = len(self.poses)
        if self.relatives is not None and len(self.relatives) != F - 1:
            raise ContractError(f"{len(self.relatives)} relative poses for {F} frames")
        if self.variance is not None:
            if np.shape(self.variance) != (F - 1, 6):
                raise ContractError(f"variance shape {np.shape(self.variance)} != {(F - 1, 6)}")
            if np.any(np.asarray(self.variance) < 0):
                raise ContractError("negative variance")
        if self.position_variance is not None and np.shape(self.position_variance) != (F, 3):
            raise ContractError(f"position variance shape {np.shape(self.position_variance)} != {(F, 3)}")


@dataclass
class MetricReport:
    t_rel: float
    r_rel: float
    per_length: list = field(default_factory=list)   # dicts: length, t_rel, r_rel, count
    num_frames: int = 0

    @property
    def empty(self) -> bool:
        return not self.per_length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(float(d["t_rel"]), float(d["r_rel"]), list(d.get("per_length", [])), int(d.get("num_frames", 0)))


def bayesian_trajectory(start: np.ndarray, mean: np.ndarray, variance: np.ndarray,
                        samples: np.ndarray | None = None) -> TrajectoryEstimate:
    """Trajectory from the predictive mean; position variance from composed samples when given."""
    poses = compose_trajectory(mean, start)
    pos_var = None
    if samples is not None:
        paths = np.stack([compose_trajectory(s, start)[:, :3, 3] for s in samples])
        pos_var = paths.var(axis=0, ddof=1)
    return TrajectoryEstimate(poses, relatives=np.asarray(mean), variance=np.asarray(variance), position_variance=pos_var)


def _poses(x) -> np.ndarray:
    return x.poses if isinstance(x, TrajectoryEstimate) else np.asarray(x, dtype=np.float64)


def path_distances(poses: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _batch_inv(T: np.ndarray) -> np.ndarray:
    R = T[:, :3, :3]
    Rt = np.transpose(R, (0, 2, 1))
    out = np.zeros_like(T)
    out[:, :3, :3] = Rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", Rt, T[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def _batch_angle(R: np.ndarray) -> np.ndarray:
    skew = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    return np.arctan2(0.5 * np.linalg.norm(skew, axis=1), 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0))


def segment_errors(pred, gt, lengths=LENGTHS) -> dict:
    """Per-length arrays of (translation error / L, rotation error / L) over all anchors."""
    P, G = _poses(pred), _poses(gt)
    if P.shape != G.shape:
        raise ContractError(f"trajectory length mismatch: {P.shape[0]} predicted vs {G.shape[0]} ground truth")
    dist = path_distances(G)
    anchors = np.arange(len(G))
    out = {}
    for L in lengths:
        ends = np.searchsorted(dist, dist + L, side="left")
        ok = ends < len(G)
        i, j = anchors[ok], ends[ok]
        # searchsorted on dist + L can land one short of ">= L" under rounding
        short = dist[j] - dist[i] < L
        j = np.where(short, j + 1, j)
        keep = j < len(G)
        i, j = i[keep], j[keep]
        if not len(i):
            out[L] = (np.empty(0), np.empty(0))
            continue
        d_gt = _batch_inv(G[i]) @ G[j]
        d_pred = _batch_inv(P[i]) @ P[j]
        # residual inv(d_pred) @ d_gt, with the translation written as R_p^T (t_g - t_p)
        # so identical spans give an exact zero
        Rp_t = np.transpose(d_pred[:, :3, :3], (0, 2, 1))
        t_err = np.linalg.norm(np.einsum("nij,nj->ni", Rp_t, d_gt[:, :3, 3] - d_pred[:, :3, 3]), axis=1)
        r_err = _batch_angle(Rp_t @ d_gt[:, :3, :3])
        out[L] = (t_err / L, r_err / L)
    return out


def evaluate(pred, gt, lengths=LENGTHS) -> MetricReport:
    """Average translational (%) and rotational (deg/100 m) RMSE over sub-sequences."""
    errs = segment_errors(pred, gt, lengths)
    rows = []
    for L, (t, r) in errs.items():
        if len(t) == 0:
            continue
        rows.append({"length": int(L),
                     "t_rel": float(100.0 * np.sqrt(np.mean(t ** 2))),
                     "r_rel": float(100.0 * np.degrees(np.sqrt(np.mean(r ** 2)))),
                     "count": int(len(t))})
    n = len(_poses(gt))
    if not rows:
        return MetricReport(0.0, 0.0, [], n)
    return MetricReport(float(np.mean([r["t_rel"] for r in rows])), float(np.mean([r["r_rel"] for r in rows])),
                        rows, n)


# -- uncertainty ---------------------------------------------------------------------

def spearman(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Rank correlation; returns (0.0, True) when either input is constant."""
    from scipy import stats

    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, True
    return float(stats.spearmanr(x, y).statistic), False


def pose_errors(pred_rel: np.ndarray, gt_rel: np.ndarray) -> np.ndarray:
    """Absolute per-component errors of relative poses (angles wrapped)."""
    d = np.asarray(pred_rel, dtype=np.float64) - np.asarray(gt_rel, dtype=np.float64)
    d[:, 3:] = wrap_angle(d[:, 3:])
    return np.abs(d)


def box_bins(errors: np.ndarray, sigmas: np.ndarray, num_bins: int = 5) -> list[dict]:
    """Quantile bins of the error with the distribution of sigma inside each."""
    edges = np.quantile(errors, np.linspace(0, 1, num_bins + 1))
    which = np.clip(np.searchsorted(edges, errors, side="right") - 1, 0, num_bins - 1)
    rows = []
    for b in range(num_bins):
        s = sigmas[which == b]
        stats = np.percentile(s, [0, 25, 50, 75, 100]) if len(s) else [np.nan] * 5
        rows.append({"bin": b, "error_lo": float(edges[b]), "error_hi": float(edges[b + 1]), "count": int(len(s)),
                     "sigma_min": float(stats[0]), "sigma_q1": float(stats[1]), "sigma_median": float(stats[2]),
                     "sigma_q3": float(stats[3]), "sigma_max": float(stats[4])})
    return rows


def summarize_uncertainty(pred: TrajectoryEstimate, gt, num_bins: int = 5) -> dict:
    """Spearman(|error|, sigma) per pose component plus box-plot bins."""
    if pred.variance is None or pred.relatives is None:
        raise ContractError("uncertainty summary needs predicted relatives and variances")
    gt_rel = gt.relatives if isinstance(gt, TrajectoryEstimate) and gt.relatives is not None else None
    if gt_rel is None:
        gt_rel = relative_sequence(_poses(gt))
    if len(gt_rel) != len(pred.relatives):
        raise ContractError("prediction and ground truth differ in length")
    errors = pose_errors(pred.relatives, gt_rel)
    sigmas = np.sqrt(pred.variance)
    summary = {"components": {}, "boxes": []}
    for c, name in enumerate(COMPONENTS):
        rho, degenerate = spearman(errors[:, c], sigmas[:, c])
        summary["components"][name] = {"spearman": rho, "degenerate": degenerate,
                                       "mean_variance": float(np.mean(pred.variance[:, c])),
                                       "mean_abs_error": float(np.mean(errors[:, c]))}
        for row in box_bins(errors[:, c], sigmas[:, c], num_bins):
            summary["boxes"].append({"component": name, **row})
    return summary


# -- export ---------------------------------------------------------------------------

def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})


def export_report(report: MetricReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write a metric report as JSON or CSV (format from ``fmt`` or the suffix)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    elif fmt == "csv":
        _write_csv(path, METRIC_COLUMNS, report.per_length)
    else:
        raise ValueError(f"unsupported report format {fmt!r}")
    return path


def load_report(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))


def export_trajectory(pred: TrajectoryEstimate, gt, path: str | Path) -> Path:
    G = _poses(gt)
    rows = []
    columns = TRAJECTORY_COLUMNS + (TRAJECTORY_VAR_COLUMNS if pred.position_variance is not None else [])
    for k in range(len(G)):
        row = {"frame": k, "gt_x": G[k, 0, 3], "gt_y": G[k, 1, 3], "gt_z": G[k, 2, 3],
               "pred_x": pred.poses[k, 0, 3], "pred_y": pred.poses[k, 1, 3], "pred_z": pred.poses[k, 2, 3]}
        if pred.position_variance is not None:
            row.update(zip(TRAJECTORY_VAR_COLUMNS, pred.position_variance[k]))
        rows.append(row)
    _write_csv(Path(path), columns, rows)
    return Path(path)


def export_box_bins(summary: dict, path: str | Path) -> Path:
    _write_csv(Path(path), BOX_COLUMNS, summary["boxes"])
    return Path(path)
