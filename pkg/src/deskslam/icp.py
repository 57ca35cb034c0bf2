"""Feature-based scan-to-map registration.

Gauss-Newton ICP: point-to-plane residuals on planar features against the
target's tangent planes, point-to-point residuals on edge features. The
pose increment left-multiplies the current estimate; twist ordering is
(rotation, translation) as everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from deskslam.core import PointCloud, RigidTransform, compose, se3_exp
from deskslam.octree import Octree
from deskslam.surface import FeatureSets

MIN_CORRESPONDENCES = 10


@dataclass
class IcpResult:
    transform: RigidTransform
    fitness: float
    iterations: int
    converged: bool


def icp_point_to_plane(source: PointCloud, features: FeatureSets,
                       target: PointCloud, target_tree: Octree,
                       init: RigidTransform,
                       max_iters: int = 30, gate: float = 1.0,
                       tol: float = 1e-6, edge_weight: float = 1.0) -> IcpResult:
    """Align source features to the target map starting from `init`.

    Correspondences farther than `gate` are dropped each iteration;
    fitness is the matched fraction of feature points at the final
    estimate. Fewer than 10 correspondences fails with fitness 0.
    """
    if target.normals is None:
        raise ValueError("target cloud needs normals for point-to-plane ICP")
    planar_pts = source.points[features.planar_indices]
    edge_pts = source.points[features.edge_indices]
    n_features = len(planar_pts) + len(edge_pts)
    if n_features == 0:
        return IcpResult(init, 0.0, 0, False)

    T = init
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        H = np.zeros((6, 6))
        g = np.zeros(6)
        n_matched = 0

        if len(planar_pts):
            moved = T.apply(planar_pts)
            idx, dist = target_tree.knn_batch(moved, 1)
            ok = dist[:, 0] <= gate
            n_matched += int(ok.sum())
            q = target.points[idx[ok, 0]]
            nrm = target.normals[idx[ok, 0]]
            p = moved[ok]
            r = np.einsum("ij,ij->i", p - q, nrm)
            J = np.hstack([np.cross(p, nrm), nrm])  # d r / d(rot, trans)
            H += J.T @ J
            g += J.T @ r

        if len(edge_pts):
            moved = T.apply(edge_pts)
            idx, dist = target_tree.knn_batch(moved, 1)
            ok = dist[:, 0] <= gate
            n_matched += int(ok.sum())
            q = target.points[idx[ok, 0]]
            p = moved[ok]
            r = (p - q) * edge_weight
            for a in range(len(p)):
                Ja = np.zeros((3, 6))
                px, py, pz = p[a]
                Ja[:, :3] = -np.array([[0, -pz, py], [pz, 0, -px], [-py, px, 0]])
                Ja[:, 3:] = np.eye(3)
                Ja *= edge_weight
                H += Ja.T @ Ja
                g += Ja.T @ r[a]

        if n_matched < MIN_CORRESPONDENCES:
            return IcpResult(init, 0.0, it, False)

        step = np.linalg.solve(H + 1e-9 * np.eye(6), -g)
        T = compose(se3_exp(step), T)
        if np.linalg.norm(step) < tol:
            converged = True
            break

    # fitness at the final estimate over all feature points
    n_ok = 0
    for pts in (planar_pts, edge_pts):
        if len(pts):
            _, dist = target_tree.knn_batch(T.apply(pts), 1)
            n_ok += int((dist[:, 0] <= gate).sum())
    return IcpResult(T, n_ok / n_features, it, converged)
