"""Synthetic scene generators: denoise training samples, place-recognition
pair scans, and a square-corridor SLAM benchmark with ground truth.

Everything is generated from seeds; the repository ships no data files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from deskslam import octree
from deskslam.core import PointCloud, RigidTransform, Rng, ScanFrame, compose, rot_z
from deskslam.denoise import NoisySample
from deskslam.scancontext import ScanDescriptor, make_descriptor, shift_of_yaw_deg
from deskslam.surface import estimate_surface


# ---------------------------------------------------------------------------
# rectangular surface patches
# ---------------------------------------------------------------------------


@dataclass
class RectPatch:
    origin: np.ndarray  # corner
    u: np.ndarray       # first edge vector
    v: np.ndarray       # second edge vector
    normal: np.ndarray

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        st = rng.uniform(0.0, 1.0, size=(n, 2))
        return self.origin + st[:, :1] * self.u + st[:, 1:] * self.v


def box_patches(center: np.ndarray, size: np.ndarray, include_bottom: bool = False) -> List[RectPatch]:
    cx, cy, cz = center
    sx, sy, sz = size / 2.0
    p = []
    # vertical faces
    p.append(RectPatch(np.array([cx - sx, cy - sy, cz - sz]), np.array([0, 2 * sy, 0.0]),
                       np.array([0, 0, 2 * sz]), np.array([-1.0, 0, 0])))
    p.append(RectPatch(np.array([cx + sx, cy - sy, cz - sz]), np.array([0, 2 * sy, 0.0]),
                       np.array([0, 0, 2 * sz]), np.array([1.0, 0, 0])))
    p.append(RectPatch(np.array([cx - sx, cy - sy, cz - sz]), np.array([2 * sx, 0, 0.0]),
                       np.array([0, 0, 2 * sz]), np.array([0, -1.0, 0])))
    p.append(RectPatch(np.array([cx - sx, cy + sy, cz - sz]), np.array([2 * sx, 0, 0.0]),
                       np.array([0, 0, 2 * sz]), np.array([0, 1.0, 0])))
    # top
    p.append(RectPatch(np.array([cx - sx, cy - sy, cz + sz]), np.array([2 * sx, 0, 0.0]),
                       np.array([0, 2 * sy, 0.0]), np.array([0, 0, 1.0])))
    if include_bottom:
        p.append(RectPatch(np.array([cx - sx, cy - sy, cz - sz]), np.array([2 * sx, 0, 0.0]),
                           np.array([0, 2 * sy, 0.0]), np.array([0, 0, -1.0])))
    return p


def sample_patches(patches: List[RectPatch], rng: Rng, n: int):
    """Area-weighted sampling: (points, normals), in shuffled order so no
    index range maps to a single surface (matters for tie-breaks downstream)."""
    areas = np.array([p.area for p in patches])
    weights = areas / areas.sum()
    counts = rng.generator.multinomial(n, weights)
    pts, nrm = [], []
    for patch, c in zip(patches, counts):
        if c:
            pts.append(patch.sample(rng, int(c)))
            nrm.append(np.tile(patch.normal, (int(c), 1)))
    order = rng.permutation(n)
    return np.vstack(pts)[order], np.vstack(nrm)[order]


# ---------------------------------------------------------------------------
# denoise training scenes: plane + cubes
# ---------------------------------------------------------------------------


def plane_cube_scene(rng: Rng, n_points: int = 500, plane_extent: float = 3.0,
                     n_cubes: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Clean (points, normals) for a ground patch with boxes sitting on it."""
    patches = [RectPatch(np.array([-plane_extent, -plane_extent, 0.0]),
                         np.array([2 * plane_extent, 0, 0.0]),
                         np.array([0, 2 * plane_extent, 0.0]),
                         np.array([0, 0, 1.0]))]
    for _ in range(n_cubes):
        side = rng.uniform(0.5, 1.0)
        cx, cy = rng.uniform(-plane_extent * 0.6, plane_extent * 0.6, size=2)
        patches += box_patches(np.array([cx, cy, side / 2.0]),
                               np.array([side, side, side]))
    return sample_patches(patches, rng, n_points)


def make_denoise_dataset(seed: int, n_scenes: int = 4, n_points: int = 400,
                         noise_std: float = 0.05,
                         sigma_floor: float = 0.1) -> List[NoisySample]:
    """Plane+cube scenes with Gaussian noise on the inputs.

    Clean normals are analytic (patch normals); the curvature weights come
    from the surface-variation estimator and are floored at `sigma_floor`
    so flat regions keep a nonzero pull in the geometric loss.
    """
    rng = Rng(seed)
    samples = []
    for s in range(n_scenes):
        scene_rng = rng.child(s)
        pts, normals = plane_cube_scene(scene_rng, n_points=n_points)
        tree = octree.build(pts)
        field = estimate_surface(PointCloud(pts), tree, k=10)
        sigma = np.maximum(field.sigma, sigma_floor)
        clean = PointCloud(pts, normals=normals, curvatures=sigma)
        noisy = PointCloud(pts + scene_rng.normal(0.0, noise_std, size=pts.shape))
        samples.append(NoisySample(noisy=noisy, clean=clean, scene_id=f"scene{s}"))
    return samples


# ---------------------------------------------------------------------------
# place scans for loop-closure training
# ---------------------------------------------------------------------------


def random_place_cloud(rng: Rng, n_points: int = 800, arena: float = 18.0,
                       n_boxes: int = 6, sensor_height: float = 1.2) -> PointCloud:
    """A distinct 'place': ground plus randomly arranged boxes, sensor at origin."""
    patches = [RectPatch(np.array([-arena, -arena, -sensor_height]),
                         np.array([2 * arena, 0, 0.0]),
                         np.array([0, 2 * arena, 0.0]), np.array([0, 0, 1.0]))]
    for _ in range(n_boxes):
        w, d = rng.uniform(0.8, 3.0, size=2)
        h = rng.uniform(0.8, 2.8)
        r = rng.uniform(3.0, arena * 0.85)
        ang = rng.uniform(0, 2 * np.pi)
        center = np.array([r * np.cos(ang), r * np.sin(ang), -sensor_height + h / 2.0])
        patches += box_patches(center, np.array([w, d, h]))
    pts, _ = sample_patches(patches, rng, n_points)
    return PointCloud(pts)


def crop_wedge(cloud: PointCloud, rng: Rng, span_deg: float = 90.0) -> PointCloud:
    """Remove a random azimuth wedge (partial-overlap simulation)."""
    start = rng.uniform(0.0, 360.0)
    az = np.degrees(np.arctan2(cloud.points[:, 1], cloud.points[:, 0])) % 360.0
    rel = (az - start) % 360.0
    keep = rel > span_deg
    return PointCloud(cloud.points[keep])


def make_lcnet_pairs(seed: int, n_places: int = 40, positives_per_place: int = 2,
                     n_negatives: int = 80, n_rings: int = 20, n_sectors: int = 60,
                     max_range: float = 25.0, noise_std: float = 0.03):
    """Labeled descriptor pairs: rotated/cropped revisits vs unrelated places."""
    from deskslam.lcnet import LabeledPair

    rng = Rng(seed)
    places = [random_place_cloud(rng.child(i)) for i in range(n_places)]
    descs = [make_descriptor(c, n_rings, n_sectors, max_range) for c in places]
    pairs: List[LabeledPair] = []
    pos_rng = rng.child(10_000)
    for i, cloud in enumerate(places):
        for _ in range(positives_per_place):
            yaw_deg = pos_rng.uniform(0.0, 360.0)
            pts = cloud.points @ rot_z(np.radians(yaw_deg)).T
            pts = pts + pos_rng.normal(0.0, noise_std, size=pts.shape)
            revisit = crop_wedge(PointCloud(pts), pos_rng)
            d2 = make_descriptor(revisit, n_rings, n_sectors, max_range)
            sector = shift_of_yaw_deg(yaw_deg, n_sectors)
            pairs.append(LabeledPair(a=descs[i], b=d2, overlap=True, yaw_sector=sector))
    neg_rng = rng.child(20_000)
    for _ in range(n_negatives):
        i, j = neg_rng.choice(n_places, size=2, replace=False)
        pairs.append(LabeledPair(a=descs[int(i)], b=descs[int(j)], overlap=False))
    order = rng.child(30_000).permutation(len(pairs))
    return [pairs[int(o)] for o in order]


# ---------------------------------------------------------------------------
# square-corridor SLAM benchmark
# ---------------------------------------------------------------------------


@dataclass
class CorridorWorld:
    """Square corridor (ring between two walls) with boxes as landmarks."""

    outer: float = 28.0        # outer wall side length
    inner: float = 20.0        # inner wall side length
    wall_height: float = 3.0
    n_boxes: int = 14
    seed: int = 99
    patches: List[RectPatch] = field(default_factory=list)

    def __post_init__(self):
        rng = Rng(self.seed)
        o, i, h = self.outer / 2.0, self.inner / 2.0, self.wall_height
        z0 = 0.0
        mk = RectPatch
        # outer walls face inward, inner walls face outward
        self.patches = [
            mk(np.array([-o, -o, z0]), np.array([2 * o, 0, 0.0]), np.array([0, 0, h]), np.array([0, 1.0, 0])),
            mk(np.array([-o, o, z0]), np.array([2 * o, 0, 0.0]), np.array([0, 0, h]), np.array([0, -1.0, 0])),
            mk(np.array([-o, -o, z0]), np.array([0, 2 * o, 0.0]), np.array([0, 0, h]), np.array([1.0, 0, 0])),
            mk(np.array([o, -o, z0]), np.array([0, 2 * o, 0.0]), np.array([0, 0, h]), np.array([-1.0, 0, 0])),
            mk(np.array([-i, -i, z0]), np.array([2 * i, 0, 0.0]), np.array([0, 0, h]), np.array([0, -1.0, 0])),
            mk(np.array([-i, i, z0]), np.array([2 * i, 0, 0.0]), np.array([0, 0, h]), np.array([0, 1.0, 0])),
            mk(np.array([-i, -i, z0]), np.array([0, 2 * i, 0.0]), np.array([0, 0, h]), np.array([-1.0, 0, 0])),
            mk(np.array([i, -i, z0]), np.array([0, 2 * i, 0.0]), np.array([0, 0, h]), np.array([1.0, 0, 0])),
        ]
        # floor ring as four rectangles
        w = o - i
        self.patches += [
            mk(np.array([-o, -o, z0]), np.array([2 * o, 0, 0.0]), np.array([0, w, 0.0]), np.array([0, 0, 1.0])),
            mk(np.array([-o, i, z0]), np.array([2 * o, 0, 0.0]), np.array([0, w, 0.0]), np.array([0, 0, 1.0])),
            mk(np.array([-o, -i, z0]), np.array([w, 0, 0.0]), np.array([0, 2 * i, 0.0]), np.array([0, 0, 1.0])),
            mk(np.array([i, -i, z0]), np.array([w, 0, 0.0]), np.array([0, 2 * i, 0.0]), np.array([0, 0, 1.0])),
        ]
        # boxes scattered along the corridor centerline
        mid = (o + i) / 2.0
        for b in range(self.n_boxes):
            t = b / self.n_boxes
            ang = 2.0 * np.pi * t + rng.uniform(-0.15, 0.15)
            radius = mid + rng.uniform(-w * 0.25, w * 0.25)
            direction = np.array([np.cos(ang), np.sin(ang)])
            # project the angular position onto the square centerline
            scale = radius / max(abs(direction[0]), abs(direction[1]))
            cx, cy = direction * scale * (mid / radius)
            w_box, d_box = rng.uniform(0.6, 1.6, size=2)
            h_box = rng.uniform(0.8, 2.2)
            self.patches += box_patches(np.array([cx, cy, h_box / 2.0]),
                                        np.array([w_box, d_box, h_box]))
        self._areas = np.array([p.area for p in self.patches])

    def sample_visible(self, rng: Rng, sensor_pos: np.ndarray, n: int,
                       max_range: float) -> np.ndarray:
        """World-frame surface samples within range of the sensor.

        Rejection-samples area-weighted patch points; occlusion is not
        modeled at desk scale.
        """
        out = []
        have = 0
        for _ in range(12):
            pts, _ = sample_patches(self.patches, rng, max(4 * n, 512))
            d = np.linalg.norm(pts - sensor_pos, axis=1)
            keep = pts[d <= max_range]
            if len(keep):
                out.append(keep)
                have += len(keep)
            if have >= n:
                break
        pts = np.vstack(out)
        return pts[:n]


def square_trajectory(side: float, step: float, sensor_height: float = 1.2,
                      turn_frames: int = 6) -> List[RigidTransform]:
    """Closed square path, heading along the direction of travel.

    Corners turn in place over `turn_frames` poses so the yaw rate stays
    within a scan matcher's convergence basin.
    """
    half = side / 2.0
    corners = [np.array([-half, -half]), np.array([half, -half]),
               np.array([half, half]), np.array([-half, half])]
    poses = []
    for ci in range(4):
        a, b = corners[ci], corners[(ci + 1) % 4]
        seg = b - a
        length = np.linalg.norm(seg)
        yaw = np.arctan2(seg[1], seg[0])
        n_steps = int(np.floor(length / step))
        for s in range(n_steps):
            xy = a + seg * (s / n_steps)
            poses.append(RigidTransform(rot_z(yaw), np.array([xy[0], xy[1], sensor_height])))
        for t in range(1, turn_frames + 1):
            mid_yaw = yaw + (np.pi / 2.0) * (t / (turn_frames + 1))
            poses.append(RigidTransform(rot_z(mid_yaw), np.array([b[0], b[1], sensor_height])))
    return poses


@dataclass
class BenchmarkConfig:
    seed: int = 0
    n_points_per_scan: int = 700
    max_range: float = 14.0
    noise_std: float = 0.04
    outlier_fraction: float = 0.10
    outlier_distance: Tuple[float, float] = (0.4, 2.5)
    step_m: float = 0.75
    world_seed: int = 99


def simulate_sequence(cfg: BenchmarkConfig):
    """(frames, ground-truth poses, world) for the noisy-loop benchmark.

    Scans are in the sensor frame with Gaussian noise plus a fraction of
    far-displaced outlier points standing in for reflective artifacts.
    """
    world = CorridorWorld(seed=cfg.world_seed)
    path_side = (world.outer + world.inner) / 2.0
    gt = square_trajectory(path_side, cfg.step_m)
    rng = Rng(cfg.seed)
    frames = []
    for i, pose in enumerate(gt):
        frame_rng = rng.child(i)
        world_pts = world.sample_visible(frame_rng, pose.translation,
                                         cfg.n_points_per_scan, cfg.max_range)
        local = pose.inverse().apply(world_pts)
        local = local + frame_rng.normal(0.0, cfg.noise_std, size=local.shape)
        n_out = int(len(local) * cfg.outlier_fraction)
        if n_out:
            sel = frame_rng.choice(len(local), size=n_out, replace=False)
            direction = frame_rng.normal(size=(n_out, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            dist = frame_rng.uniform(*cfg.outlier_distance, size=(n_out, 1))
            local[sel] = local[sel] + direction * dist
        frames.append(ScanFrame(id=i, cloud=PointCloud(local), timestamp=i * 0.1,
                                pose_estimate=RigidTransform.identity()))
    return frames, gt, world
