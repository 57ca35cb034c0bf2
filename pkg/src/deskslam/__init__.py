"""Desk-scale LiDAR SLAM toolkit.

Point-cloud denoising and loop-closure detection wired into a pose-graph
backend, with a pruned-octree spatial index underneath every neighbor query.
"""

from deskslam.core import PointCloud, RigidTransform, Rng, ScanFrame, se3_exp, se3_log

__all__ = [
    "PointCloud",
    "RigidTransform",
    "Rng",
    "ScanFrame",
    "se3_exp",
    "se3_log",
]
