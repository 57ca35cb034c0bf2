"""Domain types and SE(3) algebra shared by every other module.

Geometry is carried in 64-bit floats. Twist coordinates are ordered
(rx, ry, rz, tx, ty, tz): rotation first, translation second.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROT_TOL = 1e-9
_REORTHO_TOL = 1e-12
_SMALL_ANGLE = 1e-8
LOG_ANGLE_LIMIT = np.pi - 1e-6


class NearSingularityError(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {R.shape}, {t.shape}")
        _check_finite(R, "rotation")
        _check_finite(t, "translation")
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > _REORTHO_TOL:
            if drift > ROT_TOL:
                raise ValueError(f"rotation not orthonormal (drift {drift:.3e})")
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        if abs(np.linalg.det(R) - 1.0) > ROT_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array (or single 3-vector) through the pose."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: compose(a, b).apply(p) == a.apply(b.apply(p))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def se3_exp(xi: np.ndarray) -> RigidTransform:
    """Exponential map from a twist (rx, ry, rz, tx, ty, tz) to a pose.

    Closed-form Rodrigues/V-matrix expansion with a Taylor branch below
    1e-8 rad, so the map is smooth through zero.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise ValueError(f"twist must have 6 components, got shape {xi.shape}")
    phi, rho = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = skew(phi)
    K2 = K @ K
    if theta < _SMALL_ANGLE:
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * K2
        V = np.eye(3) + ((1.0 - c) / theta**2) * K + ((theta - s) / theta**3) * K2
    return RigidTransform(R, V @ rho)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation-vector logarithm of a rotation matrix (angle < pi)."""
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= LOG_ANGLE_LIMIT:
        raise NearSingularityError(f"rotation angle {theta:.6f} too close to pi")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        # sin(theta)/theta ~ 1 - theta^2/6
        return 0.5 * w * (1.0 + theta**2 / 6.0)
    return (theta / (2.0 * np.sin(theta))) * w


def se3_log(T: RigidTransform) -> np.ndarray:
    """Twist coordinates of a pose; inverse of se3_exp for angle < pi."""
    phi = so3_log(T.rotation)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    K2 = K @ K
    if theta < _SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * K + K2 / 12.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        coef = (1.0 / theta**2) - (1.0 + c) / (2.0 * theta * s)
        Vinv = np.eye(3) - 0.5 * K + coef * K2
    return np.concatenate([phi, Vinv @ T.translation])


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point normals, curvatures, intensities.

    Optional attribute arrays must match the point count; normals are unit
    length within 1e-6 and curvatures lie in [0, 1].
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    curvatures: Optional[np.ndarray] = None
    intensities: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        _check_finite(pts, "points")
        self.points = pts
        n = len(pts)
        if self.normals is not None:
            nm = np.asarray(self.normals, dtype=np.float64)
            if nm.shape != (n, 3):
                raise ValueError(f"normals shape {nm.shape} does not match {n} points")
            _check_finite(nm, "normals")
            lengths = np.linalg.norm(nm, axis=1)
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise ValueError("normals are not unit length within 1e-6")
            self.normals = nm
        if self.curvatures is not None:
            cv = np.asarray(self.curvatures, dtype=np.float64)
            if cv.shape != (n,):
                raise ValueError(f"curvatures shape {cv.shape} does not match {n} points")
            if cv.size and (cv.min() < 0.0 or cv.max() > 1.0):
                raise ValueError("curvatures must lie in [0, 1]")
            self.curvatures = cv
        if self.intensities is not None:
            it = np.asarray(self.intensities, dtype=np.float64)
            if it.shape != (n,):
                raise ValueError(f"intensities shape {it.shape} does not match {n} points")
            self.intensities = it

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.curvatures is None else self.curvatures[idx],
            None if self.intensities is None else self.intensities[idx],
        )


def transform_cloud(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Apply a rigid transform: points by R p + t, normals by R only."""
    return PointCloud(
        T.apply(cloud.points),
        None if cloud.normals is None else cloud.normals @ T.rotation.T,
        cloud.curvatures,
        cloud.intensities,
    )


def merge_clouds(clouds: list) -> PointCloud:
    pts = np.concatenate([c.points for c in clouds], axis=0)
    return PointCloud(pts)


@dataclass
class ScanFrame:
    """A single scan with its bookkeeping: id, cloud, time, current pose estimate."""

    id: int
    cloud: PointCloud
    timestamp: float
    pose_estimate: RigidTransform = field(default_factory=RigidTransform.identity)


class Rng:
    """Deterministic random source (PCG64) with derivable child streams.

    A fixed seed reproduces identical draw sequences across runs and
    platforms. Parallel or per-stage work takes `child(key)` streams
    instead of sharing one generator.
    """

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, key: int) -> "Rng":
        return Rng(self.seed, self._spawn_key + (int(key),))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)

    def shuffle(self, x):
        self.generator.shuffle(x)

    def bytes(self, n: int) -> bytes:
        return self.generator.bytes(n)
