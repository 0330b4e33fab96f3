"""Static 3D k-d tree for exact nearest-neighbor search."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from fnsf.errors import UsageError
from fnsf.pointcloud import PointCloud

LEAF_SIZE = 16

# queries per block in the batched search
_BLOCK = 256


@dataclass(frozen=True)
class KdTree:
    """Flat node arrays over a permutation of the input points.

    Node `i` owns perm[start[i]:stop[i]]; internal nodes split on `axis[i]`
    at `split[i]` into `left[i]`/`right[i]`, leaves have left == right == -1.
    `box_min`/`box_max` are the tight bounds of the points under each node.
    """

    points: np.ndarray
    perm: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    axis: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.start.shape[0]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def sq_dist(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Squared distances between broadcast query and point arrays (last axis xyz)."""
    # fixed evaluation order so every search path produces identical values
    dx = pts[..., 0] - q[..., 0]
    dy = pts[..., 1] - q[..., 1]
    dz = pts[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


def build(cloud: PointCloud, leaf_size: int = LEAF_SIZE) -> KdTree:
    """Balanced tree: median split on the axis of widest spread."""
    if cloud.is_empty:
        raise UsageError("cannot build a k-d tree over an empty cloud")
    points = cloud.points
    perm = np.arange(len(cloud))
    start, stop, axis, split, left, right, bmin, bmax = ([] for _ in range(8))

    def node(lo: int, hi: int) -> int:
        idx = len(start)
        sub = points[perm[lo:hi]]
        lower, upper = sub.min(axis=0), sub.max(axis=0)
        start.append(lo)
        stop.append(hi)
        bmin.append(lower)
        bmax.append(upper)
        axis.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        if hi - lo <= leaf_size:
            return idx
        a = int(np.argmax(upper - lower))
        order = np.argsort(sub[:, a], kind="stable")
        perm[lo:hi] = perm[lo:hi][order]
        mid = lo + (hi - lo) // 2
        axis[idx] = a
        split[idx] = float(points[perm[mid], a])
        left[idx] = node(lo, mid)
        right[idx] = node(mid, hi)
        return idx

    node(0, len(cloud))
    return KdTree(
        points=points,
        perm=perm,
        start=np.array(start, dtype=np.int64),
        stop=np.array(stop, dtype=np.int64),
        axis=np.array(axis, dtype=np.int64),
        split=np.array(split),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        box_min=np.array(bmin),
        box_max=np.array(bmax),
    )


def _box_sq_dist(q: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    gap = np.maximum(np.maximum(lo - q, q - hi), 0.0)
    return float(gap[0] * gap[0] + gap[1] * gap[1] + gap[2] * gap[2])


def nearest_with_stats(tree: KdTree, q) -> Tuple[int, float, int]:
    """Nearest point as (index, squared distance, nodes visited)."""
    q = np.asarray(q, dtype=np.float64)
    best_d, best_i = np.inf, -1
    visited = 0
    stack = [0]
    while stack:
        n = stack.pop()
        if _box_sq_dist(q, tree.box_min[n], tree.box_max[n]) > best_d:
            continue
        visited += 1
        if tree.left[n] < 0:
            ids = tree.perm[tree.start[n]:tree.stop[n]]
            d = sq_dist(q, tree.points[ids])
            m = d.min()
            if m <= best_d:
                i = int(ids[d == m].min())
                if m < best_d or i < best_i:
                    best_d, best_i = float(m), i
            continue
        a = tree.axis[n]
        near, far = (tree.left[n], tree.right[n]) if q[a] <= tree.split[n] else (tree.right[n], tree.left[n])
        # near side is popped first
        stack.append(far)
        stack.append(near)
    return best_i, best_d, visited


def nearest(tree: KdTree, q) -> Tuple[int, float]:
    """Exact nearest stored point; ties go to the smallest index."""
    i, d, _ = nearest_with_stats(tree, q)
    return i, d


def _home_leaves(tree: KdTree, queries: np.ndarray) -> np.ndarray:
    node = np.zeros(queries.shape[0], dtype=np.int64)
    inner = tree.left[node] >= 0
    while inner.any():
        n = node[inner]
        go_left = queries[inner, tree.axis[n]] <= tree.split[n]
        node[inner] = np.where(go_left, tree.left[n], tree.right[n])
        inner = tree.left[node] >= 0
    return node


def nearest_many(tree: KdTree, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched `nearest`: (indices, squared distances) for an (M, 3) array.

    Queries are grouped by the leaf they descend to; each block first takes
    its home leaf's best distance as a radius, then scans every leaf whose
    box lies within that radius of the block's bounding box.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    m = queries.shape[0]
    out_i = np.empty(m, dtype=np.int64)
    out_d = np.empty(m)
    if m == 0:
        return out_i, out_d

    leaves = tree.leaves
    leaf_min, leaf_max = tree.box_min[leaves], tree.box_max[leaves]
    home = _home_leaves(tree, queries)
    order = np.argsort(home, kind="stable")
    cuts = np.flatnonzero(np.diff(home[order])) + 1

    for group in np.split(order, cuts):
        leaf = home[group[0]]
        own = tree.perm[tree.start[leaf]:tree.stop[leaf]]
        for lo in range(0, group.size, _BLOCK):
            block = group[lo:lo + _BLOCK]
            qb = queries[block]
            radius = sq_dist(qb[:, None, :], tree.points[own][None, :, :]).min(axis=1).max()

            gap = np.maximum(np.maximum(leaf_min - qb.max(axis=0), qb.min(axis=0) - leaf_max), 0.0)
            reach = gap[:, 0] * gap[:, 0] + gap[:, 1] * gap[:, 1] + gap[:, 2] * gap[:, 2]
            hit = leaves[reach <= radius]
            ids = np.concatenate([tree.perm[tree.start[h]:tree.stop[h]] for h in hit])

            d = sq_dist(qb[:, None, :], tree.points[ids][None, :, :])
            best = d.min(axis=1)
            tied = np.where(d == best[:, None], ids[None, :], np.iinfo(np.int64).max)
            out_i[block] = tied.min(axis=1)
            out_d[block] = best
    return out_i, out_d
