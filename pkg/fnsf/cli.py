"""Command-line entry point: synth, flow, eval, bench, ablate-grid and accumulate.

Exit codes: 0 success, 1 some benchmark rows failed (bench only), 2 usage, 3 I/O,
4 numeric failure, 5 memory budget.
"""

import argparse
import asyncio
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from dotenv import dotenv_values
from pydantic import ValidationError
from sqlmodel import Session

from fnsf import __version__, bench, plots, repo
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
    config,
)
from fnsf.errors import DataIOError, FnsfError, UsageError
from fnsf.metrics import CSV_COLUMNS, evaluate, summarize
from fnsf.pointcloud import (
    FORMATS,
    PointCloud,
    ScenePair,
    load_cloud,
    load_flow,
    save_cloud,
    save_flow,
    synth_scene,
    synth_sequence,
)
from fnsf.records import RunManifest, SceneConfig
from fnsf.solver import ENGINES, LOSSES, MODELS, SolveConfig, accumulate, solve, solve_record

logger = logging.getLogger(__name__)

SOURCE_FILE, TARGET_FILE, GT_FILE = "source.xyz", "target.xyz", "flow_gt.xyz"


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------

def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _csv_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene generator")
    g.add_argument("--points", type=_non_negative_int, default=20_000, help="source point count")
    g.add_argument("--movers", type=_non_negative_int, default=1, help="rigid movers")
    g.add_argument("--mover-fraction", type=float, default=0.3, help="share of points on movers")
    g.add_argument("--static-boxes", type=_non_negative_int, default=12)
    g.add_argument("--max-translation", type=float, default=3.0, help="meters")
    g.add_argument("--max-rotation", type=float, default=15.0, help="degrees")
    g.add_argument("--ego", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"), help="sensor translation per frame")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian sensor noise (m)")
    g.add_argument("--count-jitter", type=float, default=0.0, help="relative target count jitter")
    g.add_argument("--seed", type=int, default=0)


def _add_solve_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--loss", choices=LOSSES, default="dt")
    g.add_argument("--engine", choices=ENGINES, default="kd", help="Chamfer nearest-neighbor engine")
    g.add_argument("--direction", choices=("forward", "bidirectional"), default="forward")
    g.add_argument("--trunc", type=_positive_float, default=DEFAULT_TRUNC, help="Chamfer truncation (m)")
    g.add_argument("--cell", type=_positive_float, default=DEFAULT_CELL, help="DT grid cell (m)")
    g.add_argument("--margin", type=float, default=DEFAULT_MARGIN, help="DT grid padding (m)")
    g.add_argument("--squared", action="store_true", help="sum squared DT values")
    g.add_argument("--model", choices=MODELS, default="mlp")
    g.add_argument("--width", type=_positive_int, default=DEFAULT_WIDTH)
    g.add_argument("--depth", type=_positive_int, default=DEFAULT_DEPTH)
    g.add_argument("--voxel", type=_positive_float, default=DEFAULT_VOXEL, help="linear-model grid edge (m)")
    g.add_argument("--sigma", type=_positive_float, default=None, help="encoding width (default 2 x voxel)")
    g.add_argument("--encoding", choices=("gaussian", "triangle"), default="gaussian")
    g.add_argument("--tv-weight", type=float, default=DEFAULT_TV_WEIGHT)
    g.add_argument("--lr", type=_positive_float, default=DEFAULT_LR)
    g.add_argument("--max-iters", type=_positive_int, default=DEFAULT_MAX_ITERS)
    g.add_argument("--patience", type=_positive_int, default=DEFAULT_PATIENCE)
    g.add_argument("--min-delta", type=float, default=DEFAULT_MIN_DELTA)
    g.add_argument("--solve-seed", type=int, default=0, help="model initialization seed")
    g.add_argument("--memory-budget", type=_positive_int, default=config.MEMORY_BUDGET, help="bytes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fnsf", description="Fast neural scene flow: runtime optimization with a distance-transform loss.")
    parser.add_argument("--version", action="version", version=f"fnsf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--config", help="key=value file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene pair or sequence")
    _add_scene_flags(p)
    p.add_argument("--frames", type=int, default=2, help="frames to write (>2 writes a sequence)")
    p.add_argument("--format", choices=FORMATS, default="text-xyz")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="estimate flow from a source to a target cloud")
    p.add_argument("source")
    p.add_argument("target")
    _add_solve_flags(p)
    p.add_argument("--gt", help="ground-truth flow; adds metrics to the record")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--record", help="JSON solve record (default: <out>.json)")
    p.add_argument("-o", "--out", required=True, help="estimated flow file")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("eval", help="score an estimated flow against ground truth")
    p.add_argument("estimate")
    p.add_argument("gt")
    p.add_argument("--scene-id", default="")
    p.add_argument("--method", default="")
    p.add_argument("--record", help="solve record whose timing fills the row")
    p.add_argument("--csv", help="append the row to this file (header written when new)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="scene x method sweep")
    _add_scene_flags(p)
    _add_solve_flags(p)
    p.set_defaults(points=[20_000])
    p.add_argument("--sizes", dest="points", type=_int_list, help="comma-separated point counts (overrides --points)")
    p.add_argument("--scenes", type=_positive_int, default=3, help="seeds per size, starting at --seed")
    p.add_argument("--methods", type=_csv_list, default=list(bench.METHODS))
    p.add_argument("--workers", type=_positive_int, default=None, help=f"concurrent solves (max FNSF_THREADS={config.THREADS})")
    p.add_argument("--svg", help="stacked time-per-method chart")
    p.add_argument("--db", nargs="?", const=config.DATABASE_URL, default=None, help="persist rows (default URL: DATABASE_URL)")
    p.add_argument("-o", "--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-grid", help="DT cell-size sweep on one scene")
    _add_scene_flags(p)
    _add_solve_flags(p)
    p.add_argument("--scene", help="directory written by `synth` (default: synthesize from the scene flags)")
    p.add_argument("--cells", type=_float_list, default=[1.0, 0.5, 0.2, 0.1], help="comma-separated cell sizes (m)")
    p.add_argument("--svg", help="EPE-versus-cell chart")
    p.add_argument("-o", "--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_ablate_grid)

    p = sub.add_parser("accumulate", help="densify a frame with its neighbors")
    p.add_argument("frames", nargs="+")
    _add_solve_flags(p)
    p.add_argument("--reference", type=int, default=0, help="index of the frame to accumulate into")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_accumulate)

    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def _apply_config_file(sub: argparse.ArgumentParser, path: str) -> None:
    """Use a key=value file as flag defaults; explicit flags still win."""
    if not Path(path).is_file():
        raise DataIOError(f"config file {path} not found")
    values = dotenv_values(path)
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults: Dict[str, Any] = {}
    for key, raw in values.items():
        dest = key.strip().lower().replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"{path}: unknown key {key!r}")
        raw = raw or ""
        try:
            if action.nargs == 0:
                defaults[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif action.nargs == 3:
                defaults[dest] = tuple(float(v) for v in raw.replace(",", " ").split())
            else:
                value = action.type(raw) if action.type else raw
                if action.choices is not None and value not in action.choices:
                    raise ValueError(f"{value!r} not in {list(action.choices)}")
                defaults[dest] = value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}: bad value for {key}: {exc}") from exc
    sub.set_defaults(**defaults)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config_file(_subparser(parser, args.command), args.config)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def scene_config(args: argparse.Namespace, points: Optional[int] = None) -> SceneConfig:
    return SceneConfig(
        points=args.points if points is None else points,
        movers=args.movers,
        mover_fraction=args.mover_fraction,
        static_boxes=args.static_boxes,
        max_translation=args.max_translation,
        max_rotation_deg=args.max_rotation,
        ego_translation=tuple(args.ego),
        noise=args.noise,
        count_jitter=args.count_jitter,
    )


def solve_config(args: argparse.Namespace) -> SolveConfig:
    return SolveConfig(
        model=args.model,
        width=args.width,
        depth=args.depth,
        voxel=args.voxel,
        sigma=args.sigma,
        encoding=args.encoding,
        tv_weight=args.tv_weight,
        loss=args.loss,
        trunc=args.trunc,
        direction=args.direction,
        engine=args.engine,
        cell=args.cell,
        margin=args.margin,
        squared=args.squared,
        lr=args.lr,
        max_iters=args.max_iters,
        patience=args.patience,
        min_delta=args.min_delta,
        seed=args.solve_seed,
        memory_budget=args.memory_budget,
    )


def _snapshot(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}


def write_manifest(path, args: argparse.Namespace, argv: Sequence[str], outputs: Iterable[str]) -> Path:
    """Manifest describing how `outputs` were produced."""
    manifest = RunManifest(command=["fnsf", *argv], config=_snapshot(args), outputs=[str(o) for o in outputs])
    path = Path(path)
    try:
        path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def _manifest_for(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def _write_rows(rows: List[Dict[str, Any]], columns: List[str], out: Optional[str], append: bool = False) -> None:
    """CSV with a header row; appends skip the header when the file already has content."""
    if out is None:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        return
    path = Path(out)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction="ignore")
    if fresh:
        writer.writeheader()
    writer.writerows(rows)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a" if append else "w", encoding="utf-8", newline="") as fh:
            fh.write(buffer.getvalue())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _scene_file(directory: Path, name: str) -> Optional[Path]:
    """`name` in either on-disk format; text wins when both exist."""
    stem = Path(name).stem
    for suffix in (".xyz", ".bin"):
        path = directory / f"{stem}{suffix}"
        if path.is_file():
            return path
    return None


def _load_pair_dir(directory) -> ScenePair:
    directory = Path(directory)
    source, target = _scene_file(directory, SOURCE_FILE), _scene_file(directory, TARGET_FILE)
    if source is None or target is None:
        raise DataIOError(f"{directory} has no source/target clouds (.xyz or .bin)")
    gt = _scene_file(directory, GT_FILE)
    return ScenePair(
        source=load_cloud(source),
        target=load_cloud(target),
        gt_flow=load_flow(gt) if gt is not None else None,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if args.frames < 2:
        raise UsageError(f"--frames must be >= 2, got {args.frames}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scene_config(args)
    suffix = ".xyz" if args.format == "text-xyz" else ".bin"
    outputs: List[Path] = []

    if args.frames == 2:
        pair = synth_scene(cfg, args.seed)
        for name, write, data in (
            (SOURCE_FILE, save_cloud, pair.source),
            (TARGET_FILE, save_cloud, pair.target),
            (GT_FILE, save_flow, pair.gt_flow),
        ):
            path = out / Path(name).with_suffix(suffix)
            write(data, path, args.format)
            outputs.append(path)
        descriptor = pair.descriptor
    else:
        seq = synth_sequence(cfg, args.frames, args.seed)
        for k, frame in enumerate(seq.frames):
            path = out / f"frame_{k:03d}{suffix}"
            save_cloud(frame, path, args.format)
            outputs.append(path)
        path = out / f"gt_positions{suffix}"
        save_cloud(PointCloud(seq.gt_positions[-1]), path, args.format)
        outputs.append(path)
        descriptor = seq.descriptor

    scene_file = out / "scene.json"
    scene_file.write_text(descriptor.model_dump_json(indent=2), encoding="utf-8")
    outputs.append(scene_file)
    write_manifest(out / "manifest.json", args, argv, outputs)
    logger.info(f"✅ wrote {len(outputs)} files to {out}")
    return 0


def cmd_flow(args: argparse.Namespace, argv: Sequence[str]) -> int:
    source = load_cloud(args.source)
    target = load_cloud(args.target)
    gt = load_flow(args.gt) if args.gt else None
    pair = ScenePair(source=source, target=target, gt_flow=gt)
    cfg = solve_config(args)

    estimate = solve(pair, cfg)
    save_flow(estimate.flow, args.out, args.format)

    metrics = evaluate(estimate.flow, gt).as_dict() if gt is not None else None
    record = solve_record(estimate, cfg, pair, metrics)
    record_path = Path(args.record or f"{args.out}.json")
    try:
        record_path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {record_path}: {exc}") from exc
    write_manifest(_manifest_for(args.out), args, argv, [args.out, record_path])
    return 0


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    report = evaluate(load_flow(args.estimate), load_flow(args.gt))
    row: Dict[str, Any] = {column: "" for column in CSV_COLUMNS}
    row.update(
        scene_id=args.scene_id,
        method=args.method,
        epe_m=report.epe_m,
        acc5=report.acc5_pct,
        acc10=report.acc10_pct,
        angle_rad=report.angle_err_rad,
    )
    if args.record:
        try:
            timing = json.loads(Path(args.record).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataIOError(f"cannot read solve record {args.record}: {exc}") from exc
        row.update(
            pre_ms=timing.get("pre_compute_ms", ""),
            query_ms_total=timing.get("loss_query_ms_total", ""),
            network_ms_total=timing.get("network_ms_total", ""),
            total_ms=timing.get("total_ms", ""),
        )
    _write_rows([row], CSV_COLUMNS, args.csv, append=True)
    if args.csv:
        write_manifest(_manifest_for(args.csv), args, argv, [args.csv])
    return 0


def _persist(rows: List[Dict[str, Any]], url: str) -> None:
    engine = repo.get_engine(url)
    with Session(engine) as session:
        for row in rows:
            repo.upsert_result(session, {k: v for k, v in row.items() if v != ""})
    logger.info(f"✅ stored {len(rows)} rows in {url}")


def cmd_bench(args: argparse.Namespace, argv: Sequence[str]) -> int:
    for method in args.methods:
        if method not in bench.METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(bench.METHODS)}")
    sizes = args.points if isinstance(args.points, list) else [args.points]
    scenes = []
    for n in sizes:
        scenes.extend(bench.synth_scenes(scene_config(args, points=n), range(args.seed, args.seed + args.scenes)))

    rows = asyncio.run(bench.run_bench(scenes, args.methods, solve_config(args), args.workers))
    _write_rows(rows, bench.BENCH_COLUMNS, args.out)
    outputs = [args.out] if args.out else []

    if args.svg:
        plots.write_svg(plots.bar_chart(summarize(rows)), args.svg)
        outputs.append(args.svg)
    if args.db:
        _persist(rows, args.db)
    if outputs:
        write_manifest(_manifest_for(outputs[0]), args, argv, outputs)
    return 0 if not any(r["error"] for r in rows) else 1


def cmd_ablate_grid(args: argparse.Namespace, argv: Sequence[str]) -> int:
    pair = _load_pair_dir(args.scene) if args.scene else synth_scene(scene_config(args), args.seed)
    rows = bench.run_ablation(pair, args.cells, solve_config(args))
    _write_rows(rows, bench.ABLATION_COLUMNS, args.out)
    outputs = [args.out] if args.out else []

    if args.svg:
        cells = [r["cell"] for r in rows]
        epe = [float(r["epe_m"]) if r["epe_m"] != "" else float("nan") for r in rows]
        svg = plots.line_chart(cells, {"EPE": epe}, title="DT grid size ablation", x_label="cell (m)", y_label="EPE (m)", log_x=True)
        plots.write_svg(svg, args.svg)
        outputs.append(args.svg)
    if outputs:
        write_manifest(_manifest_for(outputs[0]), args, argv, outputs)
    return 0


def cmd_accumulate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    frames = [load_cloud(f) for f in args.frames]
    dense = accumulate(frames, solve_config(args), args.reference)
    save_cloud(dense, args.out, args.format)
    write_manifest(_manifest_for(args.out), args, argv, [args.out])
    logger.info(f"✅ wrote {len(dense)} points to {args.out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        # argparse has already printed usage
        return int(exc.code or 0)
    except FnsfError as exc:
        print(f"fnsf: {exc}", file=sys.stderr)
        return exc.exit_code

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, argv)
    except FnsfError as exc:
        logger.error(f"❌ {exc}")
        return exc.exit_code
    except ValidationError as exc:
        logger.error(f"❌ invalid parameters: {exc}")
        return UsageError.exit_code
