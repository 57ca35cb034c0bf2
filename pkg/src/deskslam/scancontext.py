"""Rotation-aware polar scan descriptors for place recognition.

A descriptor is a rings x sectors matrix of maximum point heights (empty
bins hold -1) plus a ring key of per-ring occupancy ratios. Yaw rotation
of the scan is exactly a circular column shift of the matrix, which the
matching distance searches over.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from deskslam.core import PointCloud

DEFAULT_RINGS = 20
DEFAULT_SECTORS = 60
DEFAULT_MAX_RANGE = 80.0
EMPTY_BIN = -1.0


@dataclass
class ScanDescriptor:
    matrix: np.ndarray    # (rings, sectors) max height per bin, -1 if empty
    ring_key: np.ndarray  # (rings,) occupancy ratio per ring
    max_range: float

    @property
    def n_rings(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.matrix.shape[1]


def make_descriptor(scan: PointCloud, n_rings: int = DEFAULT_RINGS,
                    n_sectors: int = DEFAULT_SECTORS,
                    max_range: float = DEFAULT_MAX_RANGE,
                    height_offset: float = 0.0) -> ScanDescriptor:
    """Bin a sensor-frame scan into (ring, sector) cells of max height.

    Ring r covers range [r, r+1) * max_range / n_rings; sector s covers
    azimuth [s, s+1) * 360 / n_sectors. Points at or beyond max_range are
    ignored. Heights are shifted by `height_offset` (set it to the sensor
    height so the ground sits near zero) and clamped below at 0, keeping
    the -1 empty sentinel unambiguous.
    """
    pts = scan.points
    rng_xy = np.hypot(pts[:, 0], pts[:, 1])
    keep = rng_xy < max_range
    pts = pts[keep]
    rng_xy = rng_xy[keep]
    matrix = np.full((n_rings, n_sectors), EMPTY_BIN, dtype=np.float64)
    if len(pts):
        azimuth = np.arctan2(pts[:, 1], pts[:, 0]) % (2.0 * np.pi)
        ring = np.minimum((rng_xy / (max_range / n_rings)).astype(np.int64), n_rings - 1)
        sector = np.minimum((azimuth / (2.0 * np.pi / n_sectors)).astype(np.int64), n_sectors - 1)
        np.maximum.at(matrix, (ring, sector), np.maximum(pts[:, 2] + height_offset, 0.0))
    occupancy = (matrix > EMPTY_BIN).mean(axis=1)
    return ScanDescriptor(matrix=matrix, ring_key=occupancy, max_range=max_range)


def _content(matrix: np.ndarray) -> np.ndarray:
    """Height columns with empty bins contributing zero."""
    return np.where(matrix > EMPTY_BIN, matrix, 0.0)


def shift_scores(a: ScanDescriptor, b: ScanDescriptor) -> np.ndarray:
    """Mean per-column cosine similarity of a vs b un-rotated by each shift.

    Column pairs where either side carries no content are skipped (the
    cited matching practice); a shift with no effective columns scores -1.
    """
    if a.matrix.shape != b.matrix.shape:
        raise ValueError(f"descriptor shapes differ: {a.matrix.shape} vs {b.matrix.shape}")
    s = a.n_sectors
    ca, cb = _content(a.matrix), _content(b.matrix)
    if not ca.any() and not cb.any():
        return np.ones(s)  # two empty descriptors are trivially identical
    na = np.linalg.norm(ca, axis=0)
    nb = np.linalg.norm(cb, axis=0)
    dots = ca.T @ cb
    denom = np.outer(na, nb)
    valid = denom > 1e-12
    cos = np.zeros_like(dots)
    cos[valid] = dots[valid] / denom[valid]
    cols = np.arange(s)
    scores = np.empty(s)
    for shift in range(s):
        rows = cos[cols, (cols + shift) % s]
        mask = valid[cols, (cols + shift) % s]
        scores[shift] = rows[mask].mean() if mask.any() else -1.0
    return scores


def descriptor_distance(a: ScanDescriptor, b: ScanDescriptor) -> Tuple[float, int]:
    """Min-over-shifts mean per-column cosine distance in [0, 1].

    The returned shift is the column roll of `b` that best aligns it with
    `a`; identical descriptors give (0.0, 0).
    """
    scores = shift_scores(a, b)
    dist = (1.0 - scores) / 2.0
    best = int(np.argmin(dist))  # ties break toward the smaller shift
    return float(dist[best]), best


def yaw_deg_of_shift(shift: int, n_sectors: int = DEFAULT_SECTORS) -> float:
    return (shift % n_sectors) * (360.0 / n_sectors)


def shift_of_yaw_deg(yaw_deg: float, n_sectors: int = DEFAULT_SECTORS) -> int:
    width = 360.0 / n_sectors
    return int(np.round((yaw_deg % 360.0) / width)) % n_sectors


@dataclass
class LoopCandidate:
    frame_id: int
    distance: float
    shift: int


def retrieve_candidates(db: Sequence[ScanDescriptor], query: ScanDescriptor,
                        exclusion: int = 50, top_n: int = 3,
                        prefilter: int = 30) -> List[LoopCandidate]:
    """Historical frames ranked by descriptor distance.

    The most recent `exclusion` database entries are never candidates (no
    trivial self matches). A ring-key nearest-neighbor prefilter bounds the
    number of full column-shift comparisons.
    """
    if exclusion < 0:
        raise ValueError("exclusion must be >= 0")
    horizon = len(db) - exclusion
    if horizon <= 0:
        return []
    keys = np.stack([db[i].ring_key for i in range(horizon)])
    d_key = np.linalg.norm(keys - query.ring_key, axis=1)
    take = min(max(prefilter, top_n), horizon)
    short = np.lexsort((np.arange(horizon), d_key))[:take]
    scored = []
    for i in short:
        dist, shift = descriptor_distance(query, db[int(i)])
        scored.append(LoopCandidate(frame_id=int(i), distance=dist, shift=shift))
    scored.sort(key=lambda c: (c.distance, c.frame_id))
    return scored[:top_n]
