"""End-to-end SLAM session: feature ICP odometry, keyframing, local-map
denoising, loop detection (descriptor retrieval + network verification),
pose-graph optimization, and deterministic output emission.

Timing diagnostics go to their own file; every other output is a pure
function of the inputs and the seed, so identical runs produce identical
bytes.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from deskslam import octree
from deskslam.cloudio import TrajectoryEstimate, ingest, write_kitti_poses, write_ply, write_tum
from deskslam.core import (PointCloud, RigidTransform, Rng, ScanFrame, compose,
                           rot_z, se3_log, transform_cloud)
from deskslam.denoise import DenoiseNet
from deskslam.evaluate import evaluate_ate
from deskslam.icp import IcpResult, icp_point_to_plane
from deskslam.lcnet import LCNet, lcnet_forward
from deskslam.plots import TRAJECTORY_CSV_HEADER, emit_trajectory_svg, trajectory_csv_rows, write_csv
from deskslam.posegraph import (DEFAULT_ODOM_INFO, Factor, PoseGraph, add_loop_factor, optimize)
from deskslam.scancontext import LoopCandidate, make_descriptor, retrieve_candidates, yaw_deg_of_shift
from deskslam.surface import estimate_surface, extract_features

log = logging.getLogger("deskslam")

ENV_SEED = "DESKSLAM_SEED"


@dataclass
class SessionConfig:
    """Every tunable of a SLAM run; file- and CLI-overridable."""

    input_dir: str = ""
    out_dir: str = "out"
    seed: int = 0
    scan_period: float = 0.1

    # keyframing
    keyframe_spacing_m: float = 1.0
    keyframe_spacing_deg: float = 10.0

    # odometry front-end
    surface_k: int = 16
    edge_quota: int = 60
    planar_quota: int = 240
    icp_max_iters: int = 30
    icp_gate: float = 1.0
    icp_min_fitness: float = 0.2
    odom_window: int = 5

    # denoising
    denoise_enabled: bool = False
    denoise_checkpoint: str = ""
    denoise_cap: int = 900
    denoise_r_small: float = 0.3
    denoise_r_large: float = 1.0

    # loop closure
    loops_enabled: bool = True
    lcnet_checkpoint: str = ""
    loop_window: int = 3
    loop_exclusion: int = 50
    loop_top_n: int = 3
    loop_dist_gate: float = 0.25
    loop_prob_gate: float = 0.6
    loop_min_fitness: float = 0.35
    loop_icp_gate: float = 2.0
    loop_max_translation: float = 8.0
    descriptor_rings: int = 20
    descriptor_sectors: int = 60
    descriptor_max_range: float = 80.0
    descriptor_height_offset: float = 0.0

    # backend
    odom_info_rot: float = 25.0
    odom_info_trans: float = 100.0
    loop_info_scale: float = 0.5

    # map export
    map_max_points: int = 60000

    def odom_information(self) -> np.ndarray:
        return np.diag([self.odom_info_rot] * 3 + [self.odom_info_trans] * 3)

    def loop_information(self) -> np.ndarray:
        return self.loop_info_scale * self.odom_information()


def parse_config_file(path) -> Dict[str, str]:
    """key = value lines; '#' starts a comment."""
    out: Dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_from_file(path, base: Optional[SessionConfig] = None) -> SessionConfig:
    cfg = base or SessionConfig()
    values = parse_config_file(path)
    valid = {f.name: f.type for f in fields(SessionConfig)}
    for key, raw in values.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            setattr(cfg, key, raw.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(cfg, key, int(raw))
        elif isinstance(current, float):
            setattr(cfg, key, float(raw))
        else:
            setattr(cfg, key, raw)
    return cfg


def apply_env_overrides(cfg: SessionConfig) -> SessionConfig:
    if ENV_SEED in os.environ:
        cfg.seed = int(os.environ[ENV_SEED])
    return cfg


@dataclass
class Keyframe:
    index: int               # keyframe index (graph node id)
    frame_id: int            # source scan id
    timestamp: float
    pose: RigidTransform     # current world estimate
    cloud: PointCloud        # raw scan, sensor frame
    local_cloud: PointCloud  # aggregated (optionally denoised) map, sensor frame
    local_normals: np.ndarray
    descriptor: object


@dataclass
class LoopEvent:
    query_kf: int
    match_kf: int
    query_frame: int
    match_frame: int
    yaw_deg: float
    prob: float
    descriptor_distance: float
    icp_fitness: float
    accepted: bool


@dataclass
class SlamResult:
    trajectory: TrajectoryEstimate
    keyframes: List[Keyframe]
    loops: List[LoopEvent]
    graph: PoseGraph
    timings_ms: Dict[str, float]
    n_frames: int
    metrics: Dict[str, float] = field(default_factory=dict)


class _StageTimer:
    def __init__(self):
        self.totals: Dict[str, float] = {}

    def add(self, stage: str, seconds: float):
        self.totals[stage] = self.totals.get(stage, 0.0) + seconds * 1e3


def _rotation_angle(T: RigidTransform) -> float:
    return float(np.linalg.norm(se3_log(T)[:3]))


def run_slam(config: SessionConfig,
             frames: Optional[List[ScanFrame]] = None,
             gt_poses: Optional[List[RigidTransform]] = None,
             denoise_net: Optional[DenoiseNet] = None,
             lc_net: Optional[LCNet] = None,
             write_outputs: bool = True) -> SlamResult:
    """Run the full pipeline over the frames (ingested from config if None)."""
    apply_env_overrides(config)
    rng = Rng(config.seed)
    timer = _StageTimer()

    if frames is None:
        t0 = time.perf_counter()
        frames = ingest(config.input_dir, config.scan_period)
        timer.add("ingest", time.perf_counter() - t0)
    if not frames:
        raise ValueError("no frames to process")

    if denoise_net is None and config.denoise_enabled and config.denoise_checkpoint:
        denoise_net = DenoiseNet(rng.child(901))
        denoise_net.load(config.denoise_checkpoint)
    if lc_net is None and config.loops_enabled and config.lcnet_checkpoint:
        lc_net = LCNet(rng.child(902), config.descriptor_rings, config.descriptor_sectors)
        lc_net.load(config.lcnet_checkpoint)

    graph = PoseGraph()
    keyframes: List[Keyframe] = []
    loops: List[LoopEvent] = []
    cur_pose = RigidTransform.identity()
    last_motion = RigidTransform.identity()
    denoise_rng = rng.child(1)
    sample_rng = rng.child(2)

    def make_keyframe(frame: ScanFrame, pose: RigidTransform) -> Keyframe:
        kf_index = len(keyframes)
        t0 = time.perf_counter()
        parts = [frame.cloud.points]
        inv = pose.inverse()
        for prev in keyframes[-config.loop_window:]:
            rel = compose(inv, prev.pose)
            parts.append(rel.apply(prev.cloud.points))
        local_pts = np.vstack(parts)
        if len(local_pts) > config.denoise_cap:
            sel = np.sort(sample_rng.choice(len(local_pts), size=config.denoise_cap, replace=False))
            local_pts = local_pts[sel]
        local = PointCloud(local_pts)
        timer.add("local_map", time.perf_counter() - t0)

        if config.denoise_enabled and denoise_net is not None:
            t0 = time.perf_counter()
            tree = octree.build(local.points)
            local, _ = denoise_net.forward(local, tree, denoise_rng.child(kf_index),
                                           config.denoise_r_small, config.denoise_r_large)
            timer.add("denoise", time.perf_counter() - t0)

        t0 = time.perf_counter()
        tree = octree.build(local.points)
        surf = estimate_surface(local, tree, min(config.surface_k, len(local.points)))
        timer.add("local_surface", time.perf_counter() - t0)

        t0 = time.perf_counter()
        desc = make_descriptor(local, config.descriptor_rings, config.descriptor_sectors,
                               config.descriptor_max_range, config.descriptor_height_offset)
        timer.add("descriptor", time.perf_counter() - t0)
        return Keyframe(kf_index, frame.id, frame.timestamp, pose, frame.cloud,
                        local, surf.normals, desc)

    def try_loop_closures(kf: Keyframe) -> bool:
        db = [k.descriptor for k in keyframes[:-1]]
        t0 = time.perf_counter()
        candidates = retrieve_candidates(db, kf.descriptor, config.loop_exclusion,
                                         config.loop_top_n)
        timer.add("loop_retrieval", time.perf_counter() - t0)
        query_feats = None
        for cand in candidates:
            if cand.distance > config.loop_dist_gate:
                continue
            old = keyframes[cand.frame_id]
            yaw = yaw_deg_of_shift(cand.shift, config.descriptor_sectors)
            prob = 1.0
            if lc_net is not None:
                t0 = time.perf_counter()
                pred = lcnet_forward(lc_net, kf.descriptor, old.descriptor)
                timer.add("loop_verify", time.perf_counter() - t0)
                prob = pred.overlap_prob
                yaw = pred.yaw_deg
                if prob <= config.loop_prob_gate:
                    loops.append(LoopEvent(kf.index, old.index, kf.frame_id, old.frame_id,
                                           yaw, prob, cand.distance, 0.0, False))
                    continue
            t0 = time.perf_counter()
            if query_feats is None:
                surf = estimate_surface(kf.local_cloud, octree.build(kf.local_cloud.points),
                                        min(config.surface_k, len(kf.local_cloud.points)))
                query_feats = extract_features(kf.local_cloud, surf, config.edge_quota,
                                               config.planar_quota)
            init = RigidTransform(rot_z(np.radians(yaw)), np.zeros(3))
            tree = octree.build(old.local_cloud.points)
            target = PointCloud(old.local_cloud.points, normals=old.local_normals)
            result = icp_point_to_plane(kf.local_cloud, query_feats, target, tree, init,
                                        config.icp_max_iters, config.loop_icp_gate)
            timer.add("loop_icp", time.perf_counter() - t0)
            fitness = result.fitness
            if np.linalg.norm(result.transform.translation) > config.loop_max_translation:
                fitness = 0.0  # refined pose is not a plausible revisit
            factor = add_loop_factor(graph, old.index, kf.index, yaw, result.transform,
                                     fitness, config.loop_min_fitness,
                                     config.loop_information())
            accepted = factor is not None
            loops.append(LoopEvent(kf.index, old.index, kf.frame_id, old.frame_id,
                                   yaw, prob, cand.distance, fitness, accepted))
            if accepted:
                t0 = time.perf_counter()
                optimize(graph)
                for k in keyframes:
                    k.pose = graph.nodes[k.index]
                timer.add("optimize", time.perf_counter() - t0)
                return True
        return False

    t_start = time.perf_counter()
    for frame in frames:
        if not keyframes:
            kf = make_keyframe(frame, cur_pose)
            keyframes.append(kf)
            graph.add_node(0, cur_pose, fixed=True)
            continue

        # odometry against the recent keyframe map
        t0 = time.perf_counter()
        target_parts = []
        normal_parts = []
        for prev in keyframes[-config.odom_window:]:
            target_parts.append(prev.pose.apply(prev.cloud.points))
            # normals estimated on the local map are in the keyframe frame
        target_pts = np.vstack(target_parts)
        target_tree = octree.build(target_pts)
        surf_t = estimate_surface(PointCloud(target_pts), target_tree,
                                  min(config.surface_k, len(target_pts)),
                                  viewpoint=cur_pose.translation)
        target = PointCloud(target_pts, normals=surf_t.normals)
        timer.add("odom_target", time.perf_counter() - t0)

        t0 = time.perf_counter()
        scan_tree = octree.build(frame.cloud.points)
        surf_s = estimate_surface(frame.cloud, scan_tree,
                                  min(config.surface_k, len(frame.cloud.points)))
        feats = extract_features(frame.cloud, surf_s, config.edge_quota, config.planar_quota)
        timer.add("features", time.perf_counter() - t0)

        t0 = time.perf_counter()
        init = compose(cur_pose, last_motion)
        result = icp_point_to_plane(frame.cloud, feats, target, target_tree, init,
                                    config.icp_max_iters, config.icp_gate)
        timer.add("odom_icp", time.perf_counter() - t0)
        prev_pose = cur_pose
        if result.fitness >= config.icp_min_fitness:
            cur_pose = result.transform
        else:
            log.warning("frame %d: ICP fitness %.2f below gate, using prediction",
                        frame.id, result.fitness)
            cur_pose = init
        last_motion = compose(prev_pose.inverse(), cur_pose)

        # keyframe decision
        rel = compose(keyframes[-1].pose.inverse(), cur_pose)
        if (np.linalg.norm(rel.translation) > config.keyframe_spacing_m
                or np.degrees(_rotation_angle(rel)) > config.keyframe_spacing_deg):
            kf = make_keyframe(frame, cur_pose)
            keyframes.append(kf)
            graph.add_node(kf.index, cur_pose)
            graph.add_factor(Factor("odometry", kf.index - 1, kf.index, rel,
                                    config.odom_information()))
            if config.loops_enabled and len(keyframes) > config.loop_exclusion:
                if try_loop_closures(kf):
                    cur_pose = keyframes[-1].pose
                    last_motion = RigidTransform.identity()
    timer.add("total", time.perf_counter() - t_start)

    trajectory = TrajectoryEstimate(
        np.array([k.timestamp for k in keyframes]),
        [k.pose for k in keyframes],
        "tum",
    )

    metrics: Dict[str, float] = {
        "n_frames": float(len(frames)),
        "n_keyframes": float(len(keyframes)),
        "n_loops_accepted": float(sum(1 for l in loops if l.accepted)),
        "n_loops_considered": float(len(loops)),
    }
    if gt_poses is not None:
        gt_traj = TrajectoryEstimate(
            np.array([f.timestamp for f in frames]),
            list(gt_poses), "tum")
        metrics.update(evaluate_ate(trajectory, gt_traj))

    result = SlamResult(trajectory, keyframes, loops, graph, timer.totals,
                        len(frames), metrics)
    if write_outputs:
        write_run_outputs(config, result, gt_poses, frames)
    return result


def write_run_outputs(config: SessionConfig, result: SlamResult,
                      gt_poses: Optional[List[RigidTransform]],
                      frames: List[ScanFrame]) -> None:
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    traj = result.trajectory
    write_kitti_poses(os.path.join(out, "trajectory_kitti.txt"), traj)
    write_tum(os.path.join(out, "trajectory_tum.txt"), traj)

    yaws = [np.degrees(np.arctan2(p.rotation[1, 0], p.rotation[0, 0])) % 360.0
            for p in traj.poses]
    write_csv(os.path.join(out, "trajectory.csv"), TRAJECTORY_CSV_HEADER,
              trajectory_csv_rows([k.frame_id for k in result.keyframes],
                                  traj.positions(), np.array(yaws)))

    write_csv(os.path.join(out, "loops.csv"),
              "query_frame,match_frame,yaw_deg,prob,descriptor_distance,icp_fitness,accepted",
              [(l.query_frame, l.match_frame, float(l.yaw_deg), float(l.prob),
                float(l.descriptor_distance), float(l.icp_fitness), int(l.accepted))
               for l in result.loops])

    write_csv(os.path.join(out, "metrics.csv"), "metric,value",
              sorted((k, float(v)) for k, v in result.metrics.items()))

    # timing is diagnostics: wall-clock, not deterministic
    write_csv(os.path.join(out, "timing.csv"), "stage,total_ms,ms_per_frame",
              [(k, float(v), float(v / max(result.n_frames, 1)))
               for k, v in sorted(result.timings_ms.items())])

    est_xy = traj.positions()[:, :2]
    gt_xy = None
    if gt_poses is not None:
        gt_xy = np.array([p.translation[:2] for p in gt_poses])
    accepted_pairs = [(l.match_kf, l.query_kf) for l in result.loops if l.accepted]
    emit_trajectory_svg(os.path.join(out, "trajectory.svg"), est_xy, gt_xy, accepted_pairs)

    # global map at optimized poses
    rng = Rng(config.seed).child(777)
    parts = [k.pose.apply(k.local_cloud.points) for k in result.keyframes]
    map_pts = np.vstack(parts)
    if len(map_pts) > config.map_max_points:
        sel = np.sort(rng.choice(len(map_pts), size=config.map_max_points, replace=False))
        map_pts = map_pts[sel]
    write_ply(os.path.join(out, "map.ply"), PointCloud(map_pts))
