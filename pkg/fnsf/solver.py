"""Runtime scene-flow optimization and Euler-integrated point accumulation."""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from sqlmodel import SQLModel

from fnsf import dt, kdtree, loss
from fnsf.config import (
    DEFAULT_CELL,
    DEFAULT_DEPTH,
    DEFAULT_LR,
    DEFAULT_MARGIN,
    DEFAULT_MAX_ITERS,
    DEFAULT_MIN_DELTA,
    DEFAULT_PATIENCE,
    DEFAULT_TRUNC,
    DEFAULT_TV_WEIGHT,
    DEFAULT_VOXEL,
    DEFAULT_WIDTH,
)
from fnsf.errors import NumericError, UsageError
from fnsf.model import FlowModel, LinearFlow, MlpFlow, adam_init, adam_step, encoder_for, linear_init, mlp_init
from fnsf.pointcloud import FlowField, PointCloud, ScenePair, ensure_non_empty
from fnsf.records import SolveRecord

logger = logging.getLogger(__name__)

MODELS = ("mlp", "linear")
LOSSES = ("dt", "cd")
ENGINES = ("brute", "kd")


class SolveConfig(SQLModel):
    """Model, loss and optimizer settings for one solve."""

    model: str = "mlp"
    width: int = DEFAULT_WIDTH
    depth: int = DEFAULT_DEPTH
    voxel: float = DEFAULT_VOXEL
    sigma: Optional[float] = None          # defaults to 2 x voxel
    encoding: str = "gaussian"
    tv_weight: float = DEFAULT_TV_WEIGHT

    loss: str = "dt"
    trunc: float = DEFAULT_TRUNC
    direction: str = "forward"
    engine: str = "kd"
    cell: float = DEFAULT_CELL
    margin: float = DEFAULT_MARGIN
    squared: bool = False

    lr: float = DEFAULT_LR
    max_iters: int = DEFAULT_MAX_ITERS
    patience: int = DEFAULT_PATIENCE
    min_delta: float = DEFAULT_MIN_DELTA
    seed: int = 0
    memory_budget: Optional[int] = None

    @property
    def method(self) -> str:
        """Short label such as "dt-mlp" or "cd-linear"."""
        return f"{self.loss}-{self.model}"


def check_config(cfg: SolveConfig) -> None:
    if cfg.model not in MODELS:
        raise UsageError(f"model must be one of {MODELS}, got {cfg.model!r}")
    if cfg.loss not in LOSSES:
        raise UsageError(f"loss must be one of {LOSSES}, got {cfg.loss!r}")
    if cfg.engine not in ENGINES:
        raise UsageError(f"engine must be one of {ENGINES}, got {cfg.engine!r}")
    if cfg.direction not in loss.DIRECTIONS:
        raise UsageError(f"direction must be one of {loss.DIRECTIONS}, got {cfg.direction!r}")
    if not cfg.lr > 0:
        raise UsageError(f"learning rate must be positive, got {cfg.lr}")
    if cfg.max_iters < 1:
        raise UsageError(f"max_iters must be >= 1, got {cfg.max_iters}")
    if cfg.patience < 1:
        raise UsageError(f"patience must be >= 1, got {cfg.patience}")
    if cfg.min_delta < 0:
        raise UsageError(f"min_delta must be >= 0, got {cfg.min_delta}")


@dataclass(frozen=True)
class TimingBreakdown:
    pre_compute_ns: int = 0
    loss_query_ns_total: int = 0
    loss_query_ns_mean: float = 0.0
    network_ns_total: int = 0
    network_ns_mean: float = 0.0
    total_ns: int = 0

    def as_ms(self) -> Dict[str, float]:
        return {
            "pre_compute_ms": self.pre_compute_ns / 1e6,
            "loss_query_ms_mean": self.loss_query_ns_mean / 1e6,
            "loss_query_ms_total": self.loss_query_ns_total / 1e6,
            "network_ms_mean": self.network_ns_mean / 1e6,
            "network_ms_total": self.network_ns_total / 1e6,
            "total_ms": self.total_ns / 1e6,
        }


@dataclass(frozen=True)
class FlowEstimate:
    flow: FlowField
    iterations_run: int
    final_loss: float
    timing: TimingBreakdown
    model: FlowModel
    loss_history: List[float] = field(default_factory=list)


def init_model(cfg: SolveConfig, source: PointCloud) -> FlowModel:
    if cfg.model == "mlp":
        return MlpFlow(mlp_init(cfg.width, cfg.depth, cfg.seed))
    spec = encoder_for(source, voxel=cfg.voxel, sigma=cfg.sigma, pad=cfg.voxel, kind=cfg.encoding)
    return LinearFlow(linear_init(spec), spec, tv_weight=cfg.tv_weight)


def _loss_fn(cfg: SolveConfig, source: PointCloud, target: PointCloud) -> Callable[[np.ndarray], loss.LossReport]:
    """Pre-compute the target-side structure once and return the per-step loss."""
    if cfg.loss == "dt":
        dtmap = dt.build_for_pair(source, target, cfg.cell, cfg.margin, cfg.memory_budget)
        return lambda deformed: loss.dt_loss(dtmap, deformed, squared=cfg.squared)
    if cfg.engine == "kd":
        tree = kdtree.build(target)
        return lambda deformed: loss.chamfer_kd(deformed, target.points, cfg.trunc, cfg.direction, target_tree=tree)
    return lambda deformed: loss.chamfer(deformed, target.points, cfg.trunc, cfg.direction)


def solve(pair: ScenePair, cfg: SolveConfig) -> FlowEstimate:
    """Optimize a fresh flow model so source + flow lands on the target.

    Stops after `max_iters` steps or once the best loss has not improved by
    `min_delta` (relative) for `patience` steps, and returns the flow of the
    best parameters seen.
    """
    check_config(cfg)
    ensure_non_empty(pair.source, "source")
    ensure_non_empty(pair.target, "target")
    started = time.perf_counter_ns()

    tick = time.perf_counter_ns()
    loss_of = _loss_fn(cfg, pair.source, pair.target)
    pre_ns = time.perf_counter_ns() - tick

    model = init_model(cfg, pair.source)
    adam = adam_init(model.arrays(), lr=cfg.lr)
    x = pair.source.points

    loss_ns = net_ns = 0
    best, best_flow, best_model = np.inf, None, model
    # patience counts steps since the loss last beat `reference` by min_delta
    reference, stale = np.inf, 0
    history: List[float] = []
    iterations = 0
    logger.info(f"🔄 solving {cfg.method} on {len(pair.source)} -> {len(pair.target)} points")

    for it in range(cfg.max_iters):
        iterations = it + 1
        tick = time.perf_counter_ns()
        try:
            flow, tape = model.forward(x)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}", where=it) from exc
        net_ns += time.perf_counter_ns() - tick

        tick = time.perf_counter_ns()
        report = loss_of(x + flow)
        loss_ns += time.perf_counter_ns() - tick

        value = report.value
        reg = model.regularizer()
        if reg is not None:
            value += reg[0]
        if not np.isfinite(value):
            raise NumericError(f"loss diverged at iteration {it}", where=it)
        history.append(value)

        if value < best or best_flow is None:
            best, best_flow, best_model = value, flow, model
        if value < reference - cfg.min_delta * abs(reference) or not np.isfinite(reference):
            reference, stale = value, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

        if it % 50 == 0:
            logger.debug(f"   iter {it}: loss {value:.6g} (best {best:.6g})")

        if it == cfg.max_iters - 1:
            break
        tick = time.perf_counter_ns()
        grads = model.backward(tape, report.dpoint)
        if reg is not None:
            grads = [g + r for g, r in zip(grads, reg[1])]
        try:
            params, adam = adam_step(adam, model.arrays(), grads)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}", where=it) from exc
        model = model.with_arrays(params)
        net_ns += time.perf_counter_ns() - tick

    timing = TimingBreakdown(
        pre_compute_ns=pre_ns,
        loss_query_ns_total=loss_ns,
        loss_query_ns_mean=loss_ns / iterations,
        network_ns_total=net_ns,
        network_ns_mean=net_ns / iterations,
        total_ns=time.perf_counter_ns() - started,
    )
    logger.info(f"✅ {cfg.method}: {iterations} iterations, loss {best:.6g}, {timing.total_ns / 1e6:.1f} ms")
    return FlowEstimate(
        flow=FlowField(best_flow),
        iterations_run=iterations,
        final_loss=float(best),
        timing=timing,
        model=best_model,
        loss_history=history,
    )


def solve_record(estimate: FlowEstimate, cfg: SolveConfig, pair: ScenePair, metrics: Optional[Dict[str, float]] = None) -> SolveRecord:
    return SolveRecord(
        config=cfg.model_dump(),
        iterations_run=estimate.iterations_run,
        final_loss=estimate.final_loss,
        source_points=len(pair.source),
        target_points=len(pair.target),
        metrics=metrics,
        **estimate.timing.as_ms(),
    )


def _carry(points: np.ndarray, models: Sequence[FlowModel]) -> np.ndarray:
    # forward Euler: each model is evaluated where the points currently are
    for model in models:
        points = points + model.evaluate(points)
    return points


def accumulate(frames: Sequence[PointCloud], cfg: SolveConfig, target_frame: int) -> PointCloud:
    """Densify `frames[target_frame]` with every other frame carried into it.

    Earlier frames follow the per-pair flows k -> k+1 forward; later frames
    follow flows k -> k-1 solved on the reversed pairs.
    """
    if len(frames) < 2:
        raise UsageError(f"accumulation needs at least 2 frames, got {len(frames)}")
    if not 0 <= target_frame < len(frames):
        raise UsageError(f"reference frame {target_frame} outside 0..{len(frames) - 1}")

    forward: List[FlowModel] = []
    for k in range(target_frame):
        forward.append(solve(ScenePair(source=frames[k], target=frames[k + 1]), cfg).model)
    backward: List[FlowModel] = []
    for k in range(len(frames) - 1, target_frame, -1):
        backward.append(solve(ScenePair(source=frames[k], target=frames[k - 1]), cfg).model)

    parts = []
    for k in range(target_frame):
        parts.append(_carry(frames[k].points, forward[k:]))
    parts.append(frames[target_frame].points)
    last = len(frames) - 1
    for k in range(target_frame + 1, len(frames)):
        parts.append(_carry(frames[k].points, backward[last - k:]))

    logger.info(f"✅ accumulated {len(frames)} frames into frame {target_frame}")
    return PointCloud(np.concatenate(parts))
