"""Pose-graph construction and nonlinear least-squares optimization on SE(3).

Factors measure relative poses between nodes (odometry, loop, prior; a GPS
kind exists but nothing in the pipeline emits it). Optimization is
Levenberg-Marquardt on the manifold: residuals are linearized with respect
to right-multiplicative twist perturbations using closed-form SE(3)
Jacobians, the damped normal equations are solved by Cholesky (sparse
assembly above a size threshold), and states retract with se3_exp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.linalg import cho_factor, cho_solve

from deskslam.core import RigidTransform, compose, se3_exp, se3_log, skew, so3_log

FactorKind = str  # "odometry" | "loop" | "prior" | "gps"

DEFAULT_ODOM_INFO = np.diag([25.0, 25.0, 25.0, 100.0, 100.0, 100.0])
DEFAULT_LOOP_INFO = 0.5 * DEFAULT_ODOM_INFO
HUBER_DELTA = 1.0
_DENSE_LIMIT = 1500  # state dimension below which dense Cholesky is used


class GraphConnectivityError(ValueError):
    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"nodes unreachable from the fixed set: {self.unreachable}")


class DampingEscalationError(RuntimeError):
    pass


@dataclass
class Factor:
    kind: FactorKind
    from_id: int
    to_id: int
    measurement: RigidTransform
    information: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.information, dtype=np.float64)
        if info.shape != (6, 6):
            raise ValueError("information matrix must be 6x6")
        if np.abs(info - info.T).max() > 1e-12:
            raise ValueError("information matrix must be symmetric within 1e-12")
        if np.linalg.eigvalsh(info).min() <= 0.0:
            raise ValueError("information matrix must be positive definite")
        self.information = info


@dataclass
class PoseGraph:
    nodes: Dict[int, RigidTransform] = field(default_factory=dict)
    factors: List[Factor] = field(default_factory=list)
    fixed: Set[int] = field(default_factory=set)

    def add_node(self, node_id: int, pose: RigidTransform, fixed: bool = False):
        first = not self.nodes
        self.nodes[node_id] = pose
        if fixed or (first and not self.fixed):
            # first node pins the gauge unless the caller fixes others
            self.fixed.add(node_id)

    def add_factor(self, factor: Factor):
        if factor.from_id not in self.nodes or factor.to_id not in self.nodes:
            raise ValueError(f"factor references unknown node: {factor.from_id}->{factor.to_id}")
        self.factors.append(factor)

    def add_odometry(self, i: int, j: int, measurement: RigidTransform,
                     information: Optional[np.ndarray] = None) -> Factor:
        f = Factor("odometry", i, j, measurement,
                   DEFAULT_ODOM_INFO if information is None else information)
        self.add_factor(f)
        return f

    def add_prior(self, i: int, measurement: RigidTransform,
                  information: Optional[np.ndarray] = None) -> Factor:
        f = Factor("prior", i, i, measurement,
                   DEFAULT_ODOM_INFO if information is None else information)
        self.add_factor(f)
        return f


def add_loop_factor(graph: PoseGraph, i: int, j: int, yaw_deg: float,
                    refined: Optional[RigidTransform], fitness: float = 1.0,
                    min_fitness: float = 0.25,
                    information: Optional[np.ndarray] = None) -> Optional[Factor]:
    """Append a loop factor from an ICP-refined relative pose.

    `yaw_deg` is the seed that initialized the refinement (kept for the
    log); a missing transform or sub-threshold fitness rejects the factor
    and returns None.
    """
    if refined is None or fitness < min_fitness:
        return None
    f = Factor("loop", i, j, refined,
               DEFAULT_LOOP_INFO if information is None else information)
    graph.add_factor(f)
    return f


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------


def residual(f: Factor, poses: Dict[int, RigidTransform]) -> np.ndarray:
    """r = log(measurement^-1 * (T_from^-1 * T_to)); prior factors use
    r = log(measurement^-1 * T_to)."""
    T_to = poses[f.to_id]
    if f.kind == "prior":
        return se3_log(compose(f.measurement.inverse(), T_to))
    T_from = poses[f.from_id]
    rel = compose(T_from.inverse(), T_to)
    return se3_log(compose(f.measurement.inverse(), rel))


def adjoint(T: RigidTransform) -> np.ndarray:
    """SE(3) adjoint in (rotation, translation) twist ordering."""
    R, t = T.rotation, T.translation
    ad = np.zeros((6, 6))
    ad[:3, :3] = R
    ad[3:, :3] = skew(t) @ R
    ad[3:, 3:] = R
    return ad


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    K2 = K @ K
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K2 / 6.0
    s, c = np.sin(theta), np.cos(theta)
    return np.eye(3) + ((1.0 - c) / theta**2) * K + ((theta - s) / theta**3) * K2


def _se3_q_matrix(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (closed form)."""
    theta = np.linalg.norm(phi)
    P = skew(phi)
    Rho = skew(rho)
    PR = P @ Rho
    RP = Rho @ P
    PRP = PR @ P
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - theta**2 / 120.0
        c2 = 1.0 / 24.0 - theta**2 / 720.0
        c3 = 1.0 / 120.0 - theta**2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (1.0 - theta**2 / 2.0 - c) / theta**4
        c3 = (theta - s - theta**3 / 6.0) / theta**5
    Q = 0.5 * Rho
    Q += c1 * (PR + RP + PRP)
    Q -= c2 * (P @ PR + RP @ P - 3.0 * PRP)
    Q -= 0.5 * (c2 - 3.0 * c3) * (PRP @ P + P @ PRP)
    return Q


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SE(3) in (rotation, translation) ordering."""
    phi, rho = xi[:3], xi[3:]
    Jl = _so3_left_jacobian(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[3:, :3] = _se3_q_matrix(phi, rho)
    return J


def se3_right_jacobian_inverse(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: d/d(eps) log(exp(xi) exp(eps)) at eps = 0."""
    return np.linalg.inv(se3_left_jacobian(-xi))


def factor_jacobians(f: Factor, poses: Dict[int, RigidTransform]):
    """Residual and its Jacobians w.r.t. right perturbations of both poses.

    Returns (r, J_from, J_to); J_from is None for priors.
    """
    r = residual(f, poses)
    Jr_inv = se3_right_jacobian_inverse(r)
    if f.kind == "prior":
        return r, None, Jr_inv
    T_from, T_to = poses[f.from_id], poses[f.to_id]
    B_inv = compose(T_to.inverse(), T_from)
    J_from = -Jr_inv @ adjoint(B_inv)
    return r, J_from, Jr_inv


def numeric_factor_jacobians(f: Factor, poses: Dict[int, RigidTransform], h: float = 1e-6):
    """Central-difference Jacobians on twist coordinates (test oracle)."""
    def perturbed(node, delta):
        p = dict(poses)
        p[node] = compose(p[node], se3_exp(delta))
        return p

    out = []
    for slot, node in enumerate((f.from_id, f.to_id)):
        if f.kind == "prior" and slot == 0:
            out.append(None)
            continue
        J = np.zeros((6, 6))
        for a in range(6):
            d = np.zeros(6)
            d[a] = h
            rp = residual(f, perturbed(node, d))
            rm = residual(f, perturbed(node, -d))
            J[:, a] = (rp - rm) / (2.0 * h)
        out.append(J)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def _check_connectivity(graph: PoseGraph):
    if not graph.fixed:
        raise ValueError("pose graph needs at least one fixed node")
    adj: Dict[int, list] = {n: [] for n in graph.nodes}
    for f in graph.factors:
        adj[f.from_id].append(f.to_id)
        adj[f.to_id].append(f.from_id)
    seen = set(graph.fixed)
    frontier = list(graph.fixed)
    while frontier:
        n = frontier.pop()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                frontier.append(m)
    unreachable = graph.nodes.keys() - seen
    if unreachable:
        raise GraphConnectivityError(unreachable)


def _robust_weight(f: Factor, r: np.ndarray) -> Tuple[float, float]:
    """(cost contribution, IRLS weight): Huber on loop factors only."""
    s = float(r @ f.information @ r)
    if f.kind != "loop":
        return s, 1.0
    norm = np.sqrt(s)
    if norm <= HUBER_DELTA:
        return s, 1.0
    return 2.0 * HUBER_DELTA * norm - HUBER_DELTA**2, HUBER_DELTA / norm


def _total_cost(graph: PoseGraph, poses) -> float:
    return sum(_robust_weight(f, residual(f, poses))[0] for f in graph.factors)


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


def optimize(graph: PoseGraph, max_iters: int = 100, tol: float = 1e-9,
             initial_damping: float = 1e-4) -> OptimizeReport:
    """Levenberg-Marquardt over all non-fixed nodes; updates poses in place.

    Damping multiplies by 10 on a rejected step and halves on acceptance;
    a normal matrix that stays indefinite through 10 consecutive
    escalations raises.
    """
    _check_connectivity(graph)
    free = sorted(n for n in graph.nodes if n not in graph.fixed)
    index = {n: i for i, n in enumerate(free)}
    dim = 6 * len(free)
    if dim == 0:
        c = _total_cost(graph, graph.nodes)
        return OptimizeReport(0, c, c, True)

    poses = dict(graph.nodes)
    lam = initial_damping
    cost = _total_cost(graph, poses)
    initial_cost = cost
    accepted = 0
    converged = False
    escalations = 0

    for _ in range(max_iters):
        rows, cols, vals = [], [], []
        b = np.zeros(dim)
        for f in graph.factors:
            r, J_from, J_to = factor_jacobians(f, poses)
            _, w = _robust_weight(f, r)
            info = w * f.information
            blocks = []
            if f.from_id in index and J_from is not None:
                blocks.append((index[f.from_id], J_from))
            if f.to_id in index:
                blocks.append((index[f.to_id], J_to))
            for bi, Ji in blocks:
                b[6 * bi : 6 * bi + 6] += Ji.T @ info @ r
                for bj, Jj in blocks:
                    H_ij = Ji.T @ info @ Jj
                    for a in range(6):
                        for c in range(6):
                            rows.append(6 * bi + a)
                            cols.append(6 * bj + c)
                            vals.append(H_ij[a, c])
        H = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsc()

        step = None
        while step is None:
            damped = H + scipy.sparse.diags(np.maximum(H.diagonal(), 1e-12) * lam)
            try:
                if dim <= _DENSE_LIMIT:
                    step = cho_solve(cho_factor(damped.toarray()), -b)
                else:
                    step = scipy.sparse.linalg.spsolve(damped, -b)
                    if not np.all(np.isfinite(step)):
                        raise np.linalg.LinAlgError("non-finite solution")
            except np.linalg.LinAlgError:
                lam *= 10.0
                escalations += 1
                if escalations >= 10:
                    raise DampingEscalationError(
                        "normal matrix stayed indefinite after 10 damping escalations")
        escalations = 0

        if np.abs(step).max() < 1e-14:
            converged = True
            break
        candidate = dict(poses)
        for n, i in index.items():
            candidate[n] = compose(poses[n], se3_exp(step[6 * i : 6 * i + 6]))
        new_cost = _total_cost(graph, candidate)
        if new_cost < cost:
            delta = cost - new_cost
            poses = candidate
            cost = new_cost
            accepted += 1
            lam = max(lam * 0.5, 1e-12)
            if delta < tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                converged = True
                break

    graph.nodes.update(poses)
    return OptimizeReport(accepted, initial_cost, cost, converged)


# ---------------------------------------------------------------------------
# g2o-style text dump/load (quaternions only at this boundary)
# ---------------------------------------------------------------------------


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with non-negative w."""
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0.0 else q


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dump_g2o(graph: PoseGraph, path) -> None:
    """VERTEX_SE3 / EDGE_SE3 text lines; information as 21 upper-triangular
    reals. Prior factors are not serialized (the format has no line for
    them); node 0 is the implicit gauge on reload."""
    with open(path, "w") as fh:
        for nid in sorted(graph.nodes):
            T = graph.nodes[nid]
            q = rotation_to_quat(T.rotation)
            fh.write(f"VERTEX_SE3 {nid} {_fmt(T.translation)} {_fmt(q)}\n")
        for f in graph.factors:
            if f.kind == "prior":
                continue
            q = rotation_to_quat(f.measurement.rotation)
            upper = f.information[np.triu_indices(6)]
            fh.write(
                f"EDGE_SE3 {f.from_id} {f.to_id} {_fmt(f.measurement.translation)} "
                f"{_fmt(q)} {_fmt(upper)}\n"
            )


def load_g2o(path) -> PoseGraph:
    graph = PoseGraph()
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "VERTEX_SE3":
                nid = int(parts[1])
                t = np.array([float(v) for v in parts[2:5]])
                q = np.array([float(v) for v in parts[5:9]])
                graph.nodes[nid] = RigidTransform(quat_to_rotation(q), t)
            elif tag == "EDGE_SE3":
                i, j = int(parts[1]), int(parts[2])
                t = np.array([float(v) for v in parts[3:6]])
                q = np.array([float(v) for v in parts[6:10]])
                upper = np.array([float(v) for v in parts[10:31]])
                info = np.zeros((6, 6))
                info[np.triu_indices(6)] = upper
                info = info + info.T - np.diag(info.diagonal())
                kind = "odometry" if abs(i - j) == 1 else "loop"
                edges.append(Factor(kind, i, j, RigidTransform(quat_to_rotation(q), t), info))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record {tag!r}")
    if graph.nodes:
        graph.fixed.add(min(graph.nodes))
    for e in edges:
        graph.add_factor(e)
    return graph
