"""Scene-flow evaluation metrics: end-point error, strict/relaxed accuracy, angle error."""

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Tuple

import numpy as np

from fnsf.errors import UsageError
from fnsf.pointcloud import FlowField

REL_EPS = 1e-12
ANGLE_EPS = 1e-9

STRICT = (0.05, 0.05)     # (absolute m, relative fraction)
RELAXED = (0.1, 0.1)

CSV_COLUMNS = [
    "scene_id",
    "method",
    "epe_m",
    "acc5",
    "acc10",
    "angle_rad",
    "pre_ms",
    "query_ms_total",
    "network_ms_total",
    "total_ms",
]


@dataclass(frozen=True)
class MetricReport:
    epe_m: float
    acc5_pct: float
    acc10_pct: float
    angle_err_rad: float
    count: int

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _pair(est, gt) -> Tuple[np.ndarray, np.ndarray]:
    e = est.vectors if isinstance(est, FlowField) else np.asarray(est, dtype=np.float64).reshape(-1, 3)
    g = gt.vectors if isinstance(gt, FlowField) else np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if e.shape[0] != g.shape[0]:
        raise UsageError(f"flow lengths differ: {e.shape[0]} estimated vs {g.shape[0]} ground truth")
    if e.shape[0] == 0:
        raise UsageError("cannot evaluate empty flow fields")
    return e, g


def epe(est, gt) -> float:
    """Mean Euclidean norm of the per-point flow error (meters)."""
    e, g = _pair(est, gt)
    return float(np.linalg.norm(e - g, axis=1).mean())


def _accuracy(est, gt, thresholds: Tuple[float, float]) -> float:
    e, g = _pair(est, gt)
    absolute, relative = thresholds
    err = np.linalg.norm(e - g, axis=1)
    rel = err / np.maximum(np.linalg.norm(g, axis=1), REL_EPS)
    return float(100.0 * np.mean((err < absolute) | (rel < relative)))


def acc_strict(est, gt) -> float:
    """Percent of points with error < 0.05 m or < 5% of the true flow."""
    return _accuracy(est, gt, STRICT)


def acc_relaxed(est, gt) -> float:
    """Percent of points with error < 0.1 m or < 10% of the true flow."""
    return _accuracy(est, gt, RELAXED)


def angle_error(est, gt) -> float:
    """Mean angle (radians) between raw 3-vectors; degenerate pairs count as 0."""
    e, g = _pair(est, gt)
    ne, ng = np.linalg.norm(e, axis=1), np.linalg.norm(g, axis=1)
    ok = (ne >= ANGLE_EPS) & (ng >= ANGLE_EPS)
    angles = np.zeros(e.shape[0])
    cos = np.einsum("ij,ij->i", e[ok], g[ok]) / (ne[ok] * ng[ok])
    angles[ok] = np.arccos(np.clip(cos, -1.0, 1.0))
    return float(angles.mean())


def evaluate(est, gt) -> MetricReport:
    e, g = _pair(est, gt)
    return MetricReport(
        epe_m=epe(e, g),
        acc5_pct=acc_strict(e, g),
        acc10_pct=acc_relaxed(e, g),
        angle_err_rad=angle_error(e, g),
        count=e.shape[0],
    )


def summarize(rows: Iterable[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Per-method means of the numeric CSV columns; rows carrying an error are counted, not averaged."""
    grouped: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
    failures: Dict[str, int] = defaultdict(int)
    for row in rows:
        if row.get("error"):
            failures[row["method"]] += 1
            continue
        grouped[row["method"]].append(row)

    summary = []
    for method in sorted(set(grouped) | set(failures)):
        ok = grouped.get(method, [])
        entry: Dict[str, Any] = {"method": method, "scenes": len(ok), "failed": failures.get(method, 0)}
        for column in CSV_COLUMNS[2:]:
            values = [float(r[column]) for r in ok if r.get(column) not in (None, "")]
            entry[column] = float(np.mean(values)) if values else float("nan")
        summary.append(entry)
    return summary
