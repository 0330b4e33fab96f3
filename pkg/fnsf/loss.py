"""Loss evaluators: truncated Chamfer (brute force and k-d tree) and the DT loss.

Each returns the scalar loss and its gradient with respect to every
deformed point, which the solver pushes back through the flow model.
"""

import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from fnsf import kdtree
from fnsf.config import DEFAULT_TRUNC
from fnsf.dt import DTMap, query_many
from fnsf.errors import UsageError
from fnsf.kdtree import KdTree, sq_dist
from fnsf.pointcloud import PointCloud

DIRECTIONS = ("forward", "bidirectional")

# pairwise distances held at once by the brute-force search
_BRUTE_CELLS = 1 << 22


@dataclass(frozen=True)
class LossReport:
    value: float
    dpoint: np.ndarray    # (N, 3) d loss / d deformed point
    eval_time: int        # nanoseconds


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def _check(deformed: np.ndarray, target: np.ndarray, trunc: float, direction: str) -> None:
    if deformed.shape[0] == 0 or target.shape[0] == 0:
        raise UsageError("Chamfer distance needs two non-empty clouds")
    if not trunc > 0:
        raise UsageError(f"truncation must be > 0, got {trunc}")
    if direction not in DIRECTIONS:
        raise UsageError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def brute_nearest(queries: np.ndarray, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Linear-scan nearest neighbor (first minimum wins, i.e. smallest index)."""
    index = np.empty(queries.shape[0], dtype=np.int64)
    best = np.empty(queries.shape[0])
    step = max(1, _BRUTE_CELLS // max(1, points.shape[0]))
    for lo in range(0, queries.shape[0], step):
        d = sq_dist(queries[lo:lo + step, None, :], points[None, :, :])
        k = np.argmin(d, axis=1)
        index[lo:lo + step] = k
        best[lo:lo + step] = d[np.arange(k.size), k]
    return index, best


def _assemble(
    deformed: np.ndarray,
    target: np.ndarray,
    trunc: float,
    fwd: Tuple[np.ndarray, np.ndarray],
    bwd: Optional[Tuple[np.ndarray, np.ndarray]],
) -> Tuple[float, np.ndarray]:
    """Sum the truncated terms; a truncated term is worth trunc^2 and has no gradient."""
    cap = trunc * trunc
    index, d2 = fwd
    keep = d2 <= cap
    value = float(np.where(keep, d2, cap).sum())
    grad = np.where(keep[:, None], 2.0 * (deformed - target[index]), 0.0)

    if bwd is not None:
        index, d2 = bwd
        keep = d2 <= cap
        value += float(np.where(keep, d2, cap).sum())
        pull = np.where(keep[:, None], 2.0 * (deformed[index] - target), 0.0)
        for axis in range(3):
            grad[:, axis] += np.bincount(index, weights=pull[:, axis], minlength=deformed.shape[0])
    return value, grad


def chamfer(deformed, target, trunc: float = DEFAULT_TRUNC, direction: str = "forward") -> LossReport:
    """Truncated Chamfer distance by exhaustive search."""
    start = time.perf_counter_ns()
    q, y = _points(deformed), _points(target)
    _check(q, y, trunc, direction)
    fwd = brute_nearest(q, y)
    bwd = brute_nearest(y, q) if direction == "bidirectional" else None
    value, grad = _assemble(q, y, trunc, fwd, bwd)
    return LossReport(value=value, dpoint=grad, eval_time=time.perf_counter_ns() - start)


def chamfer_kd(
    deformed,
    target,
    trunc: float = DEFAULT_TRUNC,
    direction: str = "forward",
    target_tree: Optional[KdTree] = None,
) -> LossReport:
    """Same value and gradients as `chamfer`, with k-d tree searches.

    Pass `target_tree` to reuse one tree across a solve; the tree over the
    deformed points is rebuilt on every bidirectional call.
    """
    start = time.perf_counter_ns()
    q, y = _points(deformed), _points(target)
    _check(q, y, trunc, direction)
    tree = target_tree if target_tree is not None else kdtree.build(PointCloud(y))
    fwd = kdtree.nearest_many(tree, q)
    bwd = None
    if direction == "bidirectional":
        bwd = kdtree.nearest_many(kdtree.build(PointCloud(q)), y)
    value, grad = _assemble(q, y, trunc, fwd, bwd)
    return LossReport(value=value, dpoint=grad, eval_time=time.perf_counter_ns() - start)


def dt_loss(dtmap: DTMap, deformed, squared: bool = False) -> LossReport:
    """Sum of queried distances (or squared distances) over the deformed points."""
    start = time.perf_counter_ns()
    values, grads = query_many(dtmap, _points(deformed))
    if squared:
        value = float((values * values).sum())
        grad = 2.0 * values[:, None] * grads
    else:
        value = float(values.sum())
        grad = grads
    return LossReport(value=value, dpoint=grad, eval_time=time.perf_counter_ns() - start)
