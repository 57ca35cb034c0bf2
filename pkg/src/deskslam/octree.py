"""Octree over a point cloud with pruned KNN and radius queries.

Every neighbor query in the toolkit goes through this index. The traversal
prunes with three ball-octant rules:

1. an octant that does not intersect the query ball is skipped;
2. once the query ball lies strictly inside a fully-processed octant,
   the search stops (nothing outside can improve the result);
3. an octant fully contained in the query ball contributes its whole
   subtree as candidates without per-child ball tests.

The tree is stored as flat arrays (DFS layout, so every subtree owns a
contiguous slice of the reordered point buffer) and the hot query kernels
are numba-compiled. All ball-octant tests use squared distances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numba import njit

from deskslam.core import PointCloud, Rng

MIN_HALF_EXTENT = 1e-7
DEFAULT_LEAF_CAPACITY = 32

_CHILD_OFFSETS = np.array(
    [[(1.0 if c & b else -1.0) for b in (1, 2, 4)] for c in range(8)]
)


@dataclass
class Octree:
    """Immutable cubic octree; safe for concurrent queries after build."""

    points: np.ndarray        # (N, 3) reordered copy, DFS leaf order
    orig_index: np.ndarray    # (N,) original index of each reordered point
    centers: np.ndarray       # (M, 3)
    halves: np.ndarray        # (M,)
    children: np.ndarray      # (M, 8), -1 where absent
    pstart: np.ndarray        # (M,) subtree slice start into points
    pcount: np.ndarray        # (M,) subtree slice length
    is_leaf: np.ndarray       # (M,) uint8
    leaf_capacity: int
    max_depth: int

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_nodes(self) -> int:
        return len(self.halves)

    def knn(self, query, k: int) -> List[Tuple[int, float]]:
        """k nearest neighbors as (index, distance), ascending by
        distance then index. Result set and order match an exhaustive scan."""
        idx, dist = self.knn_arrays(query, k)
        return list(zip(idx.tolist(), dist.tolist()))

    def knn_arrays(self, query, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        kk = min(k, len(self.points))
        out_idx = np.empty(kk, dtype=np.int64)
        out_d2 = np.empty(kk, dtype=np.float64)
        n = _knn_kernel(
            self.points, self.orig_index, self.centers, self.halves,
            self.children, self.pstart, self.pcount, self.is_leaf,
            q, kk, self._stack_size(), out_idx, out_d2,
        )
        return out_idx[:n], np.sqrt(out_d2[:n])

    def knn_batch(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """KNN for (Q, 3) queries at once: (Q, kk) indices and distances."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        qs = np.ascontiguousarray(queries, dtype=np.float64)
        kk = min(k, len(self.points))
        idx, d2 = _knn_batch_kernel(
            self.points, self.orig_index, self.centers, self.halves,
            self.children, self.pstart, self.pcount, self.is_leaf,
            qs, kk, self._stack_size(),
        )
        return idx, np.sqrt(d2)

    def radius_search(self, query, radius: float) -> List[Tuple[int, float]]:
        """All points with distance <= radius, sorted by distance then index."""
        idx, dist = self.radius_arrays(query, radius)
        return list(zip(idx.tolist(), dist.tolist()))

    def radius_arrays(self, query, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        if radius <= 0.0:
            raise ValueError(f"radius must be positive, got {radius}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx, d2, m = _radius_kernel(
            self.points, self.orig_index, self.centers, self.halves,
            self.children, self.pstart, self.pcount, self.is_leaf,
            q, float(radius) ** 2, self._stack_size(),
        )
        order = np.lexsort((idx[:m], d2[:m]))
        return idx[:m][order], np.sqrt(d2[:m][order])

    def radius_indices(self, query, radius: float) -> np.ndarray:
        """Unsorted indices within radius (cheapest form, for samplers)."""
        if radius <= 0.0:
            raise ValueError(f"radius must be positive, got {radius}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx, _, m = _radius_kernel(
            self.points, self.orig_index, self.centers, self.halves,
            self.children, self.pstart, self.pcount, self.is_leaf,
            q, float(radius) ** 2, self._stack_size(),
        )
        return idx[:m]

    def _stack_size(self) -> int:
        return 16 + 9 * (self.max_depth + 2)

    def octant_point_indices(self, node: int) -> np.ndarray:
        """Original indices of all points under a node (tests/inspection)."""
        s, c = self.pstart[node], self.pcount[node]
        return self.orig_index[s : s + c]


def build(cloud, leaf_capacity: int = DEFAULT_LEAF_CAPACITY) -> Octree:
    """Build an octree; deterministic given input order.

    The root cube is the bounding cube of the cloud expanded by 1%. A leaf
    holds at most `leaf_capacity` points unless its half-extent has shrunk
    below the minimum, which permits degenerate (duplicate-point) leaves.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot build an octree over an empty cloud")
    if leaf_capacity < 1:
        raise ValueError("leaf_capacity must be >= 1")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center0 = (lo + hi) / 2.0
    half0 = float((hi - lo).max()) * 0.5 * 1.01
    if half0 == 0.0:
        half0 = MIN_HALF_EXTENT / 2.0  # all points identical: root is a single leaf

    centers: list = []
    halves: list = []
    children: list = []
    pstarts: list = []
    pcounts: list = []
    leaves: list = []
    order_chunks: list = []
    cursor = 0
    max_depth = 0

    def rec(idx: np.ndarray, center: np.ndarray, half: float, depth: int) -> int:
        nonlocal cursor, max_depth
        max_depth = max(max_depth, depth)
        nid = len(centers)
        centers.append(center)
        halves.append(half)
        children.append([-1] * 8)
        pstarts.append(cursor)
        pcounts.append(len(idx))
        if len(idx) <= leaf_capacity or half < MIN_HALF_EXTENT:
            leaves.append(1)
            order_chunks.append(idx)
            cursor += len(idx)
            return nid
        leaves.append(0)
        p = pts[idx]
        code = (
            (p[:, 0] > center[0]).astype(np.int8)
            + 2 * (p[:, 1] > center[1]).astype(np.int8)
            + 4 * (p[:, 2] > center[2]).astype(np.int8)
        )
        sorter = np.argsort(code, kind="stable")
        sorted_idx = idx[sorter]
        bounds = np.searchsorted(code[sorter], np.arange(9))
        for c in range(8):
            lo_b, hi_b = bounds[c], bounds[c + 1]
            if hi_b > lo_b:
                child_center = center + _CHILD_OFFSETS[c] * (half / 2.0)
                children[nid][c] = rec(sorted_idx[lo_b:hi_b], child_center, half / 2.0, depth + 1)
        return nid

    rec(np.arange(n, dtype=np.int64), center0.astype(np.float64), half0, 0)
    perm = np.concatenate(order_chunks) if order_chunks else np.empty(0, dtype=np.int64)
    return Octree(
        points=np.ascontiguousarray(pts[perm]),
        orig_index=np.ascontiguousarray(perm),
        centers=np.ascontiguousarray(np.array(centers, dtype=np.float64)),
        halves=np.array(halves, dtype=np.float64),
        children=np.ascontiguousarray(np.array(children, dtype=np.int64)),
        pstart=np.array(pstarts, dtype=np.int64),
        pcount=np.array(pcounts, dtype=np.int64),
        is_leaf=np.array(leaves, dtype=np.uint8),
        leaf_capacity=leaf_capacity,
        max_depth=max_depth,
    )


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _worse(d1, i1, d2, i2):
    # lexicographic (distance, index): larger is worse
    return d1 > d2 or (d1 == d2 and i1 > i2)


@njit(cache=True)
def _heap_push(hd, hi, size, k, d, i):
    """Bounded max-heap of the k best (distance, index) pairs."""
    if size < k:
        hd[size] = d
        hi[size] = i
        j = size
        while j > 0:
            parent = (j - 1) // 2
            if _worse(hd[j], hi[j], hd[parent], hi[parent]):
                hd[j], hd[parent] = hd[parent], hd[j]
                hi[j], hi[parent] = hi[parent], hi[j]
                j = parent
            else:
                break
        return size + 1
    if _worse(hd[0], hi[0], d, i):
        hd[0] = d
        hi[0] = i
        j = 0
        while True:
            l = 2 * j + 1
            r = l + 1
            big = j
            if l < k and _worse(hd[l], hi[l], hd[big], hi[big]):
                big = l
            if r < k and _worse(hd[r], hi[r], hd[big], hi[big]):
                big = r
            if big == j:
                break
            hd[j], hd[big] = hd[big], hd[j]
            hi[j], hi[big] = hi[big], hi[j]
            j = big
    return size


@njit(cache=True, inline="always")
def _dist2_to_cube(q, cx, cy, cz, h):
    d2 = 0.0
    e = abs(q[0] - cx) - h
    if e > 0.0:
        d2 += e * e
    e = abs(q[1] - cy) - h
    if e > 0.0:
        d2 += e * e
    e = abs(q[2] - cz) - h
    if e > 0.0:
        d2 += e * e
    return d2


@njit(cache=True, inline="always")
def _ball_inside_cube(q, r2, cx, cy, cz, h):
    # strict: ball of squared radius r2 strictly inside the cube
    for a in range(3):
        if a == 0:
            m = h - abs(q[0] - cx)
        elif a == 1:
            m = h - abs(q[1] - cy)
        else:
            m = h - abs(q[2] - cz)
        if m <= 0.0 or m * m <= r2:
            return False
    return True


@njit(cache=True, inline="always")
def _ball_contains_cube(q, r2, cx, cy, cz, h):
    f = 0.0
    e = abs(q[0] - cx) + h
    f += e * e
    e = abs(q[1] - cy) + h
    f += e * e
    e = abs(q[2] - cz) + h
    f += e * e
    return f <= r2


@njit(cache=True)
def _scan_slice(points, orig_index, start, count, q, hd, hi, size, k):
    for p in range(start, start + count):
        dx = q[0] - points[p, 0]
        dy = q[1] - points[p, 1]
        dz = q[2] - points[p, 2]
        d2 = dx * dx + dy * dy + dz * dz
        size = _heap_push(hd, hi, size, k, d2, orig_index[p])
    return size


@njit(cache=True)
def _knn_kernel(points, orig_index, centers, halves, children, pstart, pcount,
                is_leaf, q, k, stack_cap, out_idx, out_d2):
    hd = np.empty(k, dtype=np.float64)
    hi = np.empty(k, dtype=np.int64)
    size = 0
    stack_node = np.empty(stack_cap, dtype=np.int64)
    stack_phase = np.empty(stack_cap, dtype=np.uint8)
    child_order = np.empty(8, dtype=np.int64)
    child_d2 = np.empty(8, dtype=np.float64)
    sp = 0
    stack_node[sp] = 0
    stack_phase[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        phase = stack_phase[sp]
        cx = centers[node, 0]
        cy = centers[node, 1]
        cz = centers[node, 2]
        h = halves[node]
        r2 = hd[0] if size == k else np.inf
        if phase == 1:
            # rule 2: ball strictly inside a fully processed octant -> done
            if size == k and _ball_inside_cube(q, r2, cx, cy, cz, h):
                break
            continue
        # rule 1: skip octants that do not intersect the query ball
        if _dist2_to_cube(q, cx, cy, cz, h) > r2:
            continue
        if is_leaf[node]:
            size = _scan_slice(points, orig_index, pstart[node], pcount[node], q, hd, hi, size, k)
            r2 = hd[0] if size == k else np.inf
            if size == k and _ball_inside_cube(q, r2, cx, cy, cz, h):
                break
            continue
        # rule 3: octant inside the ball -> whole subtree is candidate, no child tests
        if size == k and _ball_contains_cube(q, r2, cx, cy, cz, h):
            size = _scan_slice(points, orig_index, pstart[node], pcount[node], q, hd, hi, size, k)
            continue
        stack_node[sp] = node
        stack_phase[sp] = 1
        sp += 1
        m = 0
        for c in range(8):
            ch = children[node, c]
            if ch >= 0:
                child_order[m] = ch
                child_d2[m] = _dist2_to_cube(q, centers[ch, 0], centers[ch, 1], centers[ch, 2], halves[ch])
                m += 1
        # nearest child on top of the stack: push in descending-distance order
        for a in range(1, m):
            dv = child_d2[a]
            cv = child_order[a]
            b = a - 1
            while b >= 0 and child_d2[b] < dv:
                child_d2[b + 1] = child_d2[b]
                child_order[b + 1] = child_order[b]
                b -= 1
            child_d2[b + 1] = dv
            child_order[b + 1] = cv
        for a in range(m):
            stack_node[sp] = child_order[a]
            stack_phase[sp] = 0
            sp += 1
    # heap-sort ascending by (distance, index)
    n_result = size
    for pos in range(size - 1, -1, -1):
        out_d2[pos] = hd[0]
        out_idx[pos] = hi[0]
        size_m = pos
        hd[0] = hd[size_m]
        hi[0] = hi[size_m]
        j = 0
        while True:
            l = 2 * j + 1
            r = l + 1
            big = j
            if l < size_m and _worse(hd[l], hi[l], hd[big], hi[big]):
                big = l
            if r < size_m and _worse(hd[r], hi[r], hd[big], hi[big]):
                big = r
            if big == j:
                break
            hd[j], hd[big] = hd[big], hd[j]
            hi[j], hi[big] = hi[big], hi[j]
            j = big
    return n_result


@njit(cache=True)
def _knn_batch_kernel(points, orig_index, centers, halves, children, pstart,
                      pcount, is_leaf, queries, k, stack_cap):
    nq = queries.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    d2 = np.empty((nq, k), dtype=np.float64)
    for i in range(nq):
        _knn_kernel(points, orig_index, centers, halves, children, pstart,
                    pcount, is_leaf, queries[i], k, stack_cap, idx[i], d2[i])
    return idx, d2


@njit(cache=True)
def _radius_kernel(points, orig_index, centers, halves, children, pstart,
                   pcount, is_leaf, q, r2, stack_cap):
    n = points.shape[0]
    out_idx = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n, dtype=np.float64)
    m = 0
    stack_node = np.empty(stack_cap, dtype=np.int64)
    stack_phase = np.empty(stack_cap, dtype=np.uint8)
    sp = 0
    stack_node[sp] = 0
    stack_phase[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        phase = stack_phase[sp]
        cx = centers[node, 0]
        cy = centers[node, 1]
        cz = centers[node, 2]
        h = halves[node]
        if phase == 1:
            if _ball_inside_cube(q, r2, cx, cy, cz, h):
                break
            continue
        if _dist2_to_cube(q, cx, cy, cz, h) > r2:
            continue
        if _ball_contains_cube(q, r2, cx, cy, cz, h):
            # rule 3: every subtree point is inside the ball
            for p in range(pstart[node], pstart[node] + pcount[node]):
                dx = q[0] - points[p, 0]
                dy = q[1] - points[p, 1]
                dz = q[2] - points[p, 2]
                out_d2[m] = dx * dx + dy * dy + dz * dz
                out_idx[m] = orig_index[p]
                m += 1
            continue
        if is_leaf[node]:
            for p in range(pstart[node], pstart[node] + pcount[node]):
                dx = q[0] - points[p, 0]
                dy = q[1] - points[p, 1]
                dz = q[2] - points[p, 2]
                dd = dx * dx + dy * dy + dz * dz
                if dd <= r2:
                    out_d2[m] = dd
                    out_idx[m] = orig_index[p]
                    m += 1
            if _ball_inside_cube(q, r2, cx, cy, cz, h):
                break
            continue
        stack_node[sp] = node
        stack_phase[sp] = 1
        sp += 1
        for c in range(8):
            ch = children[node, c]
            if ch >= 0:
                stack_node[sp] = ch
                stack_phase[sp] = 0
                sp += 1
    return out_idx, out_d2, m


# ---------------------------------------------------------------------------
# reference implementations
# ---------------------------------------------------------------------------


def knn_exhaustive(points: np.ndarray, query, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exhaustive-scan oracle with the same (distance, index) tie-break."""
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d = points - q
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    order = np.lexsort((np.arange(len(points)), d2))[: min(k, len(points))]
    return order, np.sqrt(d2[order])


def radius_exhaustive(points: np.ndarray, query, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d = points - q
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    hit = np.flatnonzero(d2 <= radius * radius)
    order = np.lexsort((hit, d2[hit]))
    hit = hit[order]
    return hit, np.sqrt(d2[hit])


def knn_traced(tree: Octree, query, k: int):
    """Readable mirror of the numba KNN kernel that logs pruning events.

    Returns (indices, distances, events); events are tuples
    ("skip"|"stop"|"bulk", node_id, snapshot_indices). Used by the
    pruning-soundness tests; the production kernel stays uninstrumented.
    """
    q = np.asarray(query, dtype=np.float64).reshape(3)
    kk = min(k, len(tree.points))
    best: List[Tuple[float, int]] = []  # kept sorted, worst last
    events = []

    def worst_r2():
        return best[-1][0] if len(best) == kk else np.inf

    def push(d2, i):
        if len(best) < kk:
            best.append((d2, i))
            best.sort()
        elif (d2, i) < best[-1]:
            best[-1] = (d2, i)
            best.sort()

    def scan(node):
        s, c = tree.pstart[node], tree.pcount[node]
        for p in range(s, s + c):
            diff = q - tree.points[p]
            push(float(diff @ diff), int(tree.orig_index[p]))

    def cube(node):
        c = tree.centers[node]
        return c[0], c[1], c[2], tree.halves[node]

    def dist2_cube(node):
        cx, cy, cz, h = cube(node)
        e = np.maximum(np.abs(q - [cx, cy, cz]) - h, 0.0)
        return float(e @ e)

    def ball_inside(node, r2):
        cx, cy, cz, h = cube(node)
        m = h - np.abs(q - [cx, cy, cz])
        return bool(np.all(m > 0.0) and np.all(m * m > r2))

    def ball_contains(node, r2):
        cx, cy, cz, h = cube(node)
        f = np.abs(q - [cx, cy, cz]) + h
        return float(f @ f) <= r2

    def snapshot():
        return [i for _, i in best]

    def visit(node) -> bool:
        r2 = worst_r2()
        if dist2_cube(node) > r2:
            events.append(("skip", node, snapshot()))
            return False
        if tree.is_leaf[node]:
            scan(node)
        elif len(best) == kk and ball_contains(node, worst_r2()):
            events.append(("bulk", node, snapshot()))
            scan(node)
        else:
            kids = [c for c in tree.children[node] if c >= 0]
            kids.sort(key=dist2_cube)
            for ch in kids:
                if visit(ch):
                    return True
        if len(best) == kk and ball_inside(node, worst_r2()):
            events.append(("stop", node, snapshot()))
            return True
        return False

    visit(0)
    idx = np.array([i for _, i in best], dtype=np.int64)
    dist = np.sqrt([d for d, _ in best])
    return idx, dist, events


# ---------------------------------------------------------------------------
# speedup benchmark
# ---------------------------------------------------------------------------


def bench_speedup(cloud_size: int, queries: int, k: int, seed: int = 0,
                  leaf_capacity: int = DEFAULT_LEAF_CAPACITY) -> dict:
    """Wall-clock ratio of exhaustive scan to pruned octree KNN.

    Both sides answer the same query set over the same uniform cloud; the
    exhaustive side is the vectorized numpy scan with argpartition
    selection. Sizes below ~10k points are out of the pruning regime and
    the ratio is diagnostic only.
    """
    rng = Rng(seed)
    pts = rng.uniform(0.0, 10.0, size=(cloud_size, 3))
    qs = rng.uniform(0.0, 10.0, size=(queries, 3))
    tree = build(pts, leaf_capacity)
    kk = min(k, cloud_size)

    tree.knn_batch(qs[:2], kk)  # JIT warm-up outside the timed region

    t0 = time.perf_counter()
    tree_idx, _ = tree.knn_batch(qs, kk)
    pruned_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    exh_idx = np.empty((queries, kk), dtype=np.int64)
    for i in range(queries):
        d = pts - qs[i]
        d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
        part = np.argpartition(d2, kk - 1)[:kk] if kk < cloud_size else np.arange(cloud_size)
        order = np.lexsort((part, d2[part]))
        exh_idx[i] = part[order]
    exhaustive_s = time.perf_counter() - t0

    if not np.array_equal(tree_idx, exh_idx):
        raise AssertionError("pruned and exhaustive KNN disagree during benchmark")
    return {
        "cloud_size": cloud_size,
        "queries": queries,
        "k": k,
        "exhaustive_ms": exhaustive_s * 1e3,
        "pruned_ms": pruned_s * 1e3,
        "ratio": exhaustive_s / pruned_s,
    }
