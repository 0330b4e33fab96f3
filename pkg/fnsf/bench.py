"""Benchmark harness: scene x method sweeps and the DT grid-size ablation."""

import asyncio
import logging
import time
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from fnsf import dt
from fnsf.config import config
from fnsf.errors import BudgetError, FnsfError, UsageError
from fnsf.metrics import CSV_COLUMNS, evaluate
from fnsf.pointcloud import ScenePair, synth_scene
from fnsf.records import SceneConfig
from fnsf.solver import SolveConfig, solve

logger = logging.getLogger(__name__)

METHODS = ("cd-mlp", "cd-linear", "dt-mlp", "dt-linear")
BENCH_COLUMNS = CSV_COLUMNS + ["points", "error"]
ABLATION_COLUMNS = ["cell", "epe_m", "acc5", "acc10", "build_ms", "query_ms_total", "memory_bytes", "error"]
ABLATION_CELLS = (1.0, 0.5, 0.33, 0.2, 0.1, 0.05, 0.02, 0.01)


def method_config(method: str, base: SolveConfig) -> SolveConfig:
    """`base` with loss and model taken from a label such as "dt-linear"."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    loss_name, _, model_name = method.partition("-")
    return base.model_copy(update={"loss": loss_name, "model": model_name})


def synth_scenes(cfg: SceneConfig, seeds: Iterable[int]) -> List[Tuple[str, ScenePair]]:
    return [(f"seed{seed}-n{cfg.points}", synth_scene(cfg, seed)) for seed in seeds]


def run_one(scene_id: str, pair: ScenePair, method: str, base: SolveConfig) -> Dict[str, Any]:
    """Solve one scene with one method and return its CSV row."""
    cfg = method_config(method, base)
    estimate = solve(pair, cfg)
    ms = estimate.timing.as_ms()
    row: Dict[str, Any] = {
        "scene_id": scene_id,
        "method": method,
        "epe_m": "",
        "acc5": "",
        "acc10": "",
        "angle_rad": "",
        "pre_ms": ms["pre_compute_ms"],
        "query_ms_total": ms["loss_query_ms_total"],
        "network_ms_total": ms["network_ms_total"],
        "total_ms": ms["total_ms"],
        "points": len(pair.source),
        "error": "",
    }
    if pair.gt_flow is not None:
        report = evaluate(estimate.flow, pair.gt_flow)
        row.update(epe_m=report.epe_m, acc5=report.acc5_pct, acc10=report.acc10_pct, angle_rad=report.angle_err_rad)
    logger.info(f"   {scene_id} {method}: epe {row['epe_m']!s:.8} total {ms['total_ms']:.1f} ms")
    return row


def _failed_row(scene_id: str, method: str, points: int, exc: BaseException) -> Dict[str, Any]:
    row: Dict[str, Any] = {column: "" for column in BENCH_COLUMNS}
    row.update(scene_id=scene_id, method=method, points=points, error=f"{type(exc).__name__}: {exc}")
    return row


def worker_count(requested: Optional[int] = None) -> int:
    """Requested workers, capped by FNSF_THREADS."""
    if requested is not None and requested < 1:
        raise UsageError(f"workers must be >= 1, got {requested}")
    return min(requested or config.THREADS, config.THREADS)


async def run_bench(
    scenes: Sequence[Tuple[str, ScenePair]],
    methods: Sequence[str],
    base: SolveConfig,
    workers: Optional[int] = None,
) -> List[Dict[str, Any]]:
    """Run every (scene, method) solve on a bounded pool; failures become rows with `error` set."""
    for method in methods:
        method_config(method, base)
    limit = asyncio.Semaphore(worker_count(workers))
    jobs = [(scene_id, pair, method) for scene_id, pair in scenes for method in methods]
    logger.info(f"🔄 benchmarking {len(scenes)} scenes x {len(methods)} methods")
    start = time.perf_counter()

    async def one(scene_id: str, pair: ScenePair, method: str) -> Dict[str, Any]:
        async with limit:
            return await asyncio.to_thread(run_one, scene_id, pair, method, base)

    results = await asyncio.gather(*(one(*job) for job in jobs), return_exceptions=True)

    rows = []
    for (scene_id, pair, method), result in zip(jobs, results):
        if isinstance(result, Exception):
            logger.error(f"❌ {scene_id} {method}: {result}")
            rows.append(_failed_row(scene_id, method, len(pair.source), result))
        else:
            rows.append(result)
    failed = sum(1 for r in rows if r["error"])
    logger.info(f"✅ {len(rows) - failed}/{len(rows)} runs finished in {time.perf_counter() - start:.2f}s")
    return rows


def dedupe_cells(cells: Iterable[float]) -> List[float]:
    """Unique positive cell sizes, coarsest first."""
    unique = sorted({float(c) for c in cells}, reverse=True)
    if not unique:
        raise UsageError("no cell sizes given")
    if unique[-1] <= 0:
        raise UsageError(f"cell sizes must be > 0, got {unique[-1]}")
    return unique


def run_ablation(pair: ScenePair, cells: Iterable[float], base: SolveConfig) -> List[Dict[str, Any]]:
    """DT-loss solve per cell size; a cell over the memory budget yields an error row."""
    rows = []
    budget = base.memory_budget if base.memory_budget is not None else config.MEMORY_BUDGET
    for cell in dedupe_cells(cells):
        row: Dict[str, Any] = {column: "" for column in ABLATION_COLUMNS}
        row["cell"] = cell
        # sizing only; the budget is enforced by the solve below
        spec = dt.make_grid(pair.source, pair.target, cell, base.margin, budget=1 << 62)
        row["memory_bytes"] = dt.memory_bytes(spec)
        cfg = base.model_copy(update={"loss": "dt", "cell": cell, "memory_budget": budget})
        try:
            estimate = solve(pair, cfg)
        except BudgetError as exc:
            logger.warning(f"⚠️ cell {cell}: {exc}")
            row["error"] = f"BudgetError: {exc}"
            rows.append(row)
            continue
        except FnsfError as exc:
            logger.error(f"❌ cell {cell}: {exc}")
            row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        ms = estimate.timing.as_ms()
        row.update(build_ms=ms["pre_compute_ms"], query_ms_total=ms["loss_query_ms_total"])
        if pair.gt_flow is not None:
            report = evaluate(estimate.flow, pair.gt_flow)
            row.update(epe_m=report.epe_m, acc5=report.acc5_pct, acc10=report.acc10_pct)
        logger.info(f"   cell {cell}: epe {row['epe_m']!s:.8} memory {row['memory_bytes']} B")
        rows.append(row)
    return rows
