"""Registration evaluation metrics: pose RMSE, Chamfer/Recall, overlap."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import EmptyCloud, LengthMismatch
from .geom import Pose, so3_log


def relative_to_anchor(poses: list[Pose], anchor: int = 0) -> list[Pose]:
    """Express every pose in the anchor's frame, removing the global gauge."""
    base_inv = poses[anchor].inverse()
    return [base_inv @ p for p in poses]


def rmse(estimates: list[Pose], truth: list[Pose]):
    """(RMSE_T, RMSE_R): root mean square translation / rotation errors.

    The rotation error of one sample is the geodesic angle
    |log(R_est R_truth^T)|. Both means divide by the full sample count.
    """
    if len(estimates) != len(truth):
        raise LengthMismatch(f"{len(estimates)} estimates vs {len(truth)} truths")
    if not estimates:
        raise LengthMismatch("need at least one pose pair")
    e_t = np.empty(len(estimates))
    e_r = np.empty(len(estimates))
    for n, (est, ref) in enumerate(zip(estimates, truth)):
        e_t[n] = np.linalg.norm(est.translation - ref.translation)
        e_r[n] = np.linalg.norm(so3_log(est.rotation @ ref.rotation.T))
    return float(np.sqrt(np.mean(e_t ** 2))), float(np.sqrt(np.mean(e_r ** 2)))


def chamfer_and_recall(x: PointCloud, y: PointCloud, thr: float, mean: bool = False):
    """Chamfer distance and recall between two clouds.

    CD sums squared nearest-neighbor distances in both directions; with
    `mean` each directed sum is divided by its cloud's size. Recall is the
    fraction of x whose squared distance to y is at most thr.
    """
    if len(x) == 0 or len(y) == 0:
        raise EmptyCloud("chamfer_and_recall needs non-empty clouds")
    if thr <= 0:
        raise ValueError("threshold must be positive")
    d_xy, _ = cKDTree(y.xyz).query(x.xyz)
    d_yx, _ = cKDTree(x.xyz).query(y.xyz)
    sq_xy, sq_yx = d_xy ** 2, d_yx ** 2
    if mean:
        cd = float(sq_xy.mean() + sq_yx.mean())
    else:
        cd = float(sq_xy.sum() + sq_yx.sum())
    recall = float(np.mean(sq_xy <= thr))
    return cd, recall


def registration_recall(runs, thr_t: float, thr_r: float) -> float:
    """Fraction of runs with both RMSEs strictly below their thresholds.

    A run exactly at a threshold counts as failure.
    """
    if not runs:
        raise ValueError("need at least one run")
    wins = sum(1 for (rmse_t, rmse_r) in runs if rmse_t < thr_t and rmse_r < thr_r)
    return wins / len(runs)


def overlap_rate(a: PointCloud, b: PointCloud, tau: float = 0.05,
                 symmetric: bool = True) -> float:
    """Fraction of a's points with a b-neighbor within tau.

    The symmetric variant (default) averages both directions.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("overlap_rate needs non-empty clouds")
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_ab, _ = cKDTree(b.xyz).query(a.xyz, distance_upper_bound=tau * (1 + 1e-12))
    frac_ab = float(np.mean(d_ab <= tau))
    if not symmetric:
        return frac_ab
    d_ba, _ = cKDTree(a.xyz).query(b.xyz, distance_upper_bound=tau * (1 + 1e-12))
    return 0.5 * (frac_ab + float(np.mean(d_ba <= tau)))
