"""Per-point surface normals, normalized curvature, and edge/planar features.

Curvature proxy is the surface variation lambda0 / (lambda0+lambda1+lambda2)
of the local covariance eigenvalues, normalized per cloud to [0, 1] by the
cloud maximum. Normals are the smallest-eigenvalue eigenvectors, oriented
toward a declared viewpoint (the scan origin by default).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from deskslam.core import PointCloud
from deskslam.octree import Octree

DEFAULT_SURFACE_K = 16
DEFAULT_EDGE_SEPARATION = 0.3  # meters, non-maximum suppression among edge picks


class DegenerateNeighborhoodError(ValueError):
    """A point had fewer than 3 distinct neighbors."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"point {index} has fewer than 3 distinct neighbors")


@dataclass
class SurfaceField:
    """Per-point local surface estimates for one cloud."""

    normals: np.ndarray          # (N, 3) unit vectors
    sigma: np.ndarray            # (N,) normalized curvature in [0, 1]
    raw_curvature: np.ndarray    # (N,) surface variation before normalization
    neighborhood_size: int

    def __post_init__(self):
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.abs(lengths - 1.0).max() > 1e-6:
            raise ValueError("surface normals are not unit length")
        if self.sigma.size and (self.sigma.min() < -0.0 or self.sigma.max() > 1.0):
            raise ValueError("normalized curvature outside [0, 1]")


@dataclass
class FeatureSets:
    """Disjoint edge / planar point index sets for scan matching."""

    edge_indices: np.ndarray
    planar_indices: np.ndarray

    def __post_init__(self):
        e = set(self.edge_indices.tolist())
        if e & set(self.planar_indices.tolist()):
            raise ValueError("edge and planar index sets overlap")


def estimate_surface(cloud: PointCloud, tree: Octree, k: int = DEFAULT_SURFACE_K,
                     viewpoint: Optional[np.ndarray] = None) -> SurfaceField:
    """PCA over each point's k nearest neighbors (the point included).

    Normal = eigenvector of the smallest covariance eigenvalue; raw
    curvature = lambda0 / sum(lambda); sigma = raw / max(raw) per cloud
    (all zeros for a perfectly planar cloud).
    """
    if k < 4:
        raise ValueError(f"surface estimation needs k >= 4, got {k}")
    n = len(cloud)
    if n < k:
        raise ValueError(f"cloud of {n} points is smaller than k={k}")
    pts = cloud.points
    nbr_idx, _ = tree.knn_batch(pts, k)
    nbr = pts[nbr_idx]  # (N, k, 3)

    # fewer than 3 distinct neighbor positions -> ill-posed PCA
    eq_first = np.all(nbr == nbr[:, :1, :], axis=2)
    j_second = np.argmax(~eq_first, axis=1)
    second = nbr[np.arange(n), j_second]
    eq_second = np.all(nbr == second[:, None, :], axis=2)
    degenerate = np.all(eq_first | eq_second, axis=1)
    if degenerate.any():
        raise DegenerateNeighborhoodError(int(np.flatnonzero(degenerate)[0]))

    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    eigvals = np.maximum(eigvals, 0.0)
    normals = eigvecs[:, :, 0]
    total = eigvals.sum(axis=1)
    raw = np.where(total > 0.0, eigvals[:, 0] / np.where(total > 0.0, total, 1.0), 0.0)

    vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    flip = np.einsum("ni,ni->n", normals, vp - pts) < 0.0
    normals = np.where(flip[:, None], -normals, normals)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    peak = raw.max()
    sigma = raw / peak if peak > 0.0 else np.zeros_like(raw)
    return SurfaceField(normals=normals, sigma=sigma, raw_curvature=raw, neighborhood_size=k)


def extract_features(cloud: PointCloud, surfaces: SurfaceField, edge_quota: int,
                     planar_quota: int,
                     edge_separation: float = DEFAULT_EDGE_SEPARATION) -> FeatureSets:
    """Top-sigma points as edges (with spatial non-maximum suppression),
    bottom-sigma points as planar. Ties break by index; sets are disjoint."""
    n = len(cloud)
    if edge_quota > n or planar_quota > n:
        warnings.warn(f"feature quotas ({edge_quota}, {planar_quota}) exceed cloud size {n}; clamping")
        edge_quota = min(edge_quota, n)
        planar_quota = min(planar_quota, n)
    sigma = surfaces.sigma
    pts = cloud.points

    desc = np.lexsort((np.arange(n), -sigma))
    chosen_edges: list = []
    sep2 = edge_separation * edge_separation
    for i in desc:
        if len(chosen_edges) >= edge_quota:
            break
        if chosen_edges:
            d = pts[chosen_edges] - pts[i]
            if np.min(np.einsum("ij,ij->i", d, d)) < sep2:
                continue
        chosen_edges.append(int(i))
    edge_arr = np.array(sorted(chosen_edges), dtype=np.int64)

    asc = np.lexsort((np.arange(n), sigma))
    edge_set = set(edge_arr.tolist())
    planar: list = []
    for i in asc:
        if len(planar) >= planar_quota:
            break
        if int(i) not in edge_set:
            planar.append(int(i))
    if len(planar) < planar_quota:
        warnings.warn(f"planar quota {planar_quota} not met; selected {len(planar)}")
    return FeatureSets(edge_indices=edge_arr, planar_indices=np.array(sorted(planar), dtype=np.int64))
