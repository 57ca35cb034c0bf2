"""Cloud and trajectory file formats.

Clouds: ASCII PLY (x y z with optional nx ny nz) and KITTI-style .bin
(little-endian float32 x, y, z, intensity records). Trajectories: KITTI
pose lines (12 reals, row-major 3x4) and TUM lines (timestamp tx ty tz
qx qy qz qw). All text floats are written with shortest round-trip repr,
so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from deskslam.core import PointCloud, RigidTransform, ScanFrame
from deskslam.posegraph import quat_to_rotation, rotation_to_quat

KITTI_RECORD_BYTES = 16


class FormatError(ValueError):
    pass


def _f(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# KITTI .bin clouds
# ---------------------------------------------------------------------------


def read_kitti_bin(path) -> PointCloud:
    size = os.path.getsize(path)
    if size % KITTI_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: truncated record at byte offset {size - size % KITTI_RECORD_BYTES} "
            f"(file size {size} is not a multiple of {KITTI_RECORD_BYTES})"
        )
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(raw)):
        bad = int(np.flatnonzero(~np.isfinite(raw).all(axis=1))[0])
        raise FormatError(f"{path}: non-finite record at offset {bad * KITTI_RECORD_BYTES}")
    return PointCloud(raw[:, :3].astype(np.float64), intensities=raw[:, 3].astype(np.float64))


def write_kitti_bin(path, cloud: PointCloud) -> None:
    inten = cloud.intensities if cloud.intensities is not None else np.zeros(len(cloud))
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    rec[:, 3] = inten
    rec.tofile(path)


# ---------------------------------------------------------------------------
# ASCII PLY clouds
# ---------------------------------------------------------------------------


def write_ply(path, cloud: PointCloud) -> None:
    has_normals = cloud.normals is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if has_normals:
            f.write("property float nx\nproperty float ny\nproperty float nz\n")
        f.write("end_header\n")
        for i in range(len(cloud)):
            row = [_f(v) for v in cloud.points[i]]
            if has_normals:
                row += [_f(v) for v in cloud.normals[i]]
            f.write(" ".join(row) + "\n")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise FormatError(f"{path}: not a PLY file (first line {line!r})")
        n_vertex = None
        props: List[str] = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: header without end_header")
            token = line.split()
            if not token:
                continue
            if token[0] == "format":
                if token[1] != "ascii":
                    raise FormatError(f"{path}: only ASCII PLY is supported")
            elif token[0] == "element":
                if token[1] == "vertex":
                    n_vertex = int(token[2])
                elif int(token[2]) > 0:
                    raise FormatError(f"{path}: unsupported element {token[1]}")
            elif token[0] == "property":
                props.append(token[-1])
            elif token[0] == "end_header":
                break
        if n_vertex is None:
            raise FormatError(f"{path}: missing vertex element")
        for need in ("x", "y", "z"):
            if need not in props:
                raise FormatError(f"{path}: missing property {need}")
        cols = {name: i for i, name in enumerate(props)}
        data = np.empty((n_vertex, len(props)))
        for i in range(n_vertex):
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: vertex {i} missing (file truncated)")
            vals = line.split()
            if len(vals) != len(props):
                raise FormatError(f"{path}: vertex {i} has {len(vals)} fields, expected {len(props)}")
            data[i] = [float(v) for v in vals]
    pts = data[:, [cols["x"], cols["y"], cols["z"]]]
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = data[:, [cols["nx"], cols["ny"], cols["nz"]]]
        lens = np.linalg.norm(normals, axis=1)
        normals = normals / np.where(lens > 0, lens, 1.0)[:, None]
    return PointCloud(pts, normals=normals)


# ---------------------------------------------------------------------------
# scan directory ingestion
# ---------------------------------------------------------------------------


def ingest(path, scan_period: float = 0.1) -> List[ScanFrame]:
    """Load a directory of .bin / .ply scans in lexicographic order."""
    names = sorted(
        n for n in os.listdir(path) if n.endswith(".bin") or n.endswith(".ply")
    )
    if not names:
        raise FormatError(f"{path}: no .bin or .ply scans found")
    frames = []
    for i, name in enumerate(names):
        full = os.path.join(path, name)
        cloud = read_kitti_bin(full) if name.endswith(".bin") else read_ply(full)
        frames.append(ScanFrame(id=i, cloud=cloud, timestamp=i * scan_period))
    return frames


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryEstimate:
    """Timestamped poses; timestamps must be strictly increasing."""

    timestamps: np.ndarray
    poses: List[RigidTransform]
    format_tag: str = "tum"

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps = ts

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def write_kitti_poses(path, traj: TrajectoryEstimate) -> None:
    with open(path, "w") as f:
        for T in traj.poses:
            M = np.hstack([T.rotation, T.translation[:, None]])
            f.write(" ".join(_f(v) for v in M.reshape(-1)) + "\n")


def read_kitti_poses(path, scan_period: float = 0.1) -> TrajectoryEstimate:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 reals, got {len(vals)}")
            M = np.array(vals).reshape(3, 4)
            poses.append(RigidTransform(M[:, :3], M[:, 3]))
    return TrajectoryEstimate(np.arange(len(poses)) * scan_period, poses, "kitti")


def write_tum(path, traj: TrajectoryEstimate) -> None:
    with open(path, "w") as f:
        for ts, T in zip(traj.timestamps, traj.poses):
            q = rotation_to_quat(T.rotation)
            f.write(f"{_f(ts)} {' '.join(_f(v) for v in T.translation)} "
                    f"{' '.join(_f(v) for v in q)}\n")


def read_tum(path) -> TrajectoryEstimate:
    stamps, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 reals, got {len(vals)}")
            stamps.append(vals[0])
            poses.append(RigidTransform(quat_to_rotation(np.array(vals[4:8])), np.array(vals[1:4])))
    return TrajectoryEstimate(np.array(stamps), poses, "tum")
