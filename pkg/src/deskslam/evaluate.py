"""Trajectory evaluation: rigid (no-scale) alignment and ATE/drift metrics.

Protocol: estimated and ground-truth poses are associated by timestamp
(within 0.05 s), positions are aligned with the closed-form rigid Umeyama
solution (rotation + translation, unit scale), and the report carries the
RMSE of aligned position errors plus the mean translational error per
100 m of traveled ground-truth path.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from deskslam.cloudio import TrajectoryEstimate
from deskslam.core import RigidTransform

ASSOCIATION_WINDOW_S = 0.05


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping src points onto dst (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform(R, mu_d - R @ mu_s)


def associate(ts_a: np.ndarray, ts_b: np.ndarray,
              window: float = ASSOCIATION_WINDOW_S) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy nearest-timestamp association within the window."""
    ia, ib = [], []
    j = 0
    for i, t in enumerate(ts_a):
        while j + 1 < len(ts_b) and abs(ts_b[j + 1] - t) <= abs(ts_b[j] - t):
            j += 1
        if abs(ts_b[j] - t) <= window:
            ia.append(i)
            ib.append(j)
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64)


def evaluate_ate(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> Dict[str, float]:
    """RMSE after rigid alignment plus drift per 100 m of traveled path."""
    ia, ib = associate(est.timestamps, gt.timestamps)
    if len(ia) < 2:
        raise ValueError(f"only {len(ia)} poses associated; need at least 2")
    p_est = est.positions()[ia]
    p_gt = gt.positions()[ib]
    T = umeyama_alignment(p_est, p_gt)
    aligned = T.apply(p_est)
    err = np.linalg.norm(aligned - p_gt, axis=1)
    rmse = float(np.sqrt(np.mean(err**2)))
    path = float(np.linalg.norm(np.diff(p_gt, axis=0), axis=1).sum())
    drift = float(err.mean() / path * 100.0) if path > 0 else float("nan")
    return {
        "rmse_m": rmse,
        "mean_m": float(err.mean()),
        "max_m": float(err.max()),
        "drift_per_100m": drift,
        "n_associated": float(len(ia)),
        "path_length_m": path,
    }
