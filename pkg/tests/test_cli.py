"""End-to-end tests for the fnsf command line."""

import csv
import json

import numpy as np
import pytest

from fnsf.cli import main, parse_args
from fnsf.pointcloud import PointCloud, load_cloud, load_flow, save_cloud

TINY = ["--width", "8", "--depth", "2", "--max-iters", "3", "--cell", "0.5"]


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / "scene"
    assert main(["synth", "--points", "300", "--static-boxes", "2", "--seed", "4", "-o", str(out)]) == 0
    return out


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_synth_writes_pair_and_descriptors(scene_dir):
    for name in ("source.xyz", "target.xyz", "flow_gt.xyz", "scene.json", "manifest.json"):
        assert (scene_dir / name).is_file()
    assert len(load_cloud(scene_dir / "source.xyz")) == 300
    assert len(load_flow(scene_dir / "flow_gt.xyz")) == 300
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["command"][:2] == ["fnsf", "synth"]
    assert json.loads((scene_dir / "scene.json").read_text())["points"] == 300


def test_synth_is_reproducible(scene_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--points", "300", "--static-boxes", "2", "--seed", "4", "-o", str(again)]) == 0
    for name in ("source.xyz", "target.xyz", "flow_gt.xyz"):
        assert (again / name).read_bytes() == (scene_dir / name).read_bytes()


def test_synth_sequence_and_binary_format(tmp_path):
    out = tmp_path / "seq"
    assert main(["synth", "--points", "200", "--frames", "3", "--format", "binary-f32", "-o", str(out)]) == 0
    for name in ("frame_000.bin", "frame_001.bin", "frame_002.bin", "gt_positions.bin"):
        assert (out / name).is_file()
    assert len(load_cloud(out / "frame_000.bin")) == 200


@pytest.mark.parametrize("argv", [
    ["synth", "--movers", "-1", "-o", "x"],
    ["synth", "--frames", "1", "-o", "{tmp}/one"],
    ["flow", "a.xyz"],
    ["nope"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main([a.replace("{tmp}", str(tmp_path)) for a in argv]) == 2


def test_flow_writes_estimate_record_and_manifest(scene_dir, tmp_path):
    out = tmp_path / "est.xyz"
    code = main([
        "flow", str(scene_dir / "source.xyz"), str(scene_dir / "target.xyz"),
        "--gt", str(scene_dir / "flow_gt.xyz"), "-o", str(out), *TINY,
    ])
    assert code == 0
    assert len(load_flow(out)) == 300
    record = json.loads((tmp_path / "est.xyz.json").read_text())
    assert 1 <= record["iterations_run"] <= 3
    assert record["config"]["loss"] == "dt"
    assert set(record["metrics"]) >= {"epe_m", "acc5_pct", "acc10_pct", "angle_err_rad"}
    assert record["total_ms"] >= record["pre_compute_ms"]
    assert (tmp_path / "est.xyz.manifest.json").is_file()


def test_flow_missing_input_exits_3(scene_dir, tmp_path):
    code = main(["flow", str(scene_dir / "source.xyz"), str(tmp_path / "missing.xyz"), "-o", str(tmp_path / "e.xyz"), *TINY])
    assert code == 3


def test_flow_over_budget_exits_5(scene_dir, tmp_path):
    code = main([
        "flow", str(scene_dir / "source.xyz"), str(scene_dir / "target.xyz"),
        "-o", str(tmp_path / "e.xyz"), "--memory-budget", "1000", *TINY,
    ])
    assert code == 5


def test_eval_perfect_estimate_and_csv_append(scene_dir, tmp_path):
    gt = str(scene_dir / "flow_gt.xyz")
    out = tmp_path / "rows.csv"
    assert main(["eval", gt, gt, "--scene-id", "s4", "--method", "oracle", "--csv", str(out)]) == 0
    assert main(["eval", gt, gt, "--scene-id", "s4", "--method", "oracle", "--csv", str(out)]) == 0
    rows = _read_csv(out)
    assert len(rows) == 2
    row = rows[0]
    assert float(row["epe_m"]) == 0.0
    assert float(row["acc5"]) == 100.0
    assert float(row["acc10"]) == 100.0
    assert float(row["angle_rad"]) == 0.0
    assert row["method"] == "oracle"


def test_eval_length_mismatch_exits_2(tmp_path):
    save_cloud(PointCloud(np.zeros((3, 3))), tmp_path / "a.xyz")
    save_cloud(PointCloud(np.zeros((2, 3))), tmp_path / "b.xyz")
    assert main(["eval", str(tmp_path / "a.xyz"), str(tmp_path / "b.xyz")]) == 2


def test_bench_sweep_writes_rows_chart_and_database(tmp_path):
    out, svg, db = tmp_path / "bench.csv", tmp_path / "bench.svg", tmp_path / "bench.db"
    code = main([
        "bench", "--sizes", "300", "--scenes", "3", "--static-boxes", "2", "--workers", "2",
        "--svg", str(svg), "--db", f"sqlite:///{db}", "-o", str(out), *TINY,
    ])
    assert code == 0
    rows = _read_csv(out)
    assert len(rows) == 12
    assert {r["method"] for r in rows} == {"cd-mlp", "cd-linear", "dt-mlp", "dt-linear"}
    assert all(r["error"] == "" for r in rows)
    assert svg.read_text().lstrip().startswith("<svg")
    assert db.is_file()
    assert (tmp_path / "bench.csv.manifest.json").is_file()


def test_bench_failures_exit_1(tmp_path, capsys):
    code = main(["bench", "--sizes", "200", "--scenes", "1", "--methods", "dt-mlp", "--memory-budget", "1000", *TINY])
    assert code == 1
    assert "BudgetError" in capsys.readouterr().out


def test_ablate_grid_deduplicates_cells(scene_dir, tmp_path):
    out = tmp_path / "ablate.csv"
    code = main([
        "ablate-grid", "--scene", str(scene_dir), "--cells", "1.0,0.5,1.0",
        "--model", "linear", "--svg", str(tmp_path / "ablate.svg"), "-o", str(out), *TINY,
    ])
    assert code == 0
    rows = _read_csv(out)
    assert [float(r["cell"]) for r in rows] == [1.0, 0.5]
    assert int(rows[0]["memory_bytes"]) < int(rows[1]["memory_bytes"])
    assert (tmp_path / "ablate.svg").is_file()


def test_ablate_grid_reads_a_binary_scene(tmp_path):
    scene = tmp_path / "bin_scene"
    assert main(["synth", "--points", "300", "--static-boxes", "2", "--format", "binary-f32", "-o", str(scene)]) == 0
    assert (scene / "source.bin").is_file()
    out = tmp_path / "ablate.csv"
    code = main(["ablate-grid", "--scene", str(scene), "--cells", "1.0", "--model", "linear", "-o", str(out), *TINY])
    assert code == 0
    rows = _read_csv(out)
    assert len(rows) == 1
    assert rows[0]["error"] == ""
    assert float(rows[0]["epe_m"]) >= 0


def test_ablate_grid_empty_scene_dir_exits_3(tmp_path):
    assert main(["ablate-grid", "--scene", str(tmp_path), "--cells", "1.0", *TINY]) == 3


def test_accumulate_identical_frames(tmp_path):
    points = np.random.default_rng(0).uniform(-3.0, 3.0, size=(150, 3))
    paths = [tmp_path / f"f{k}.xyz" for k in range(2)]
    for path in paths:
        save_cloud(PointCloud(points), path)
    out = tmp_path / "dense.xyz"
    code = main(["accumulate", *map(str, paths), "--reference", "1", "--loss", "cd", "--model", "linear", "--voxel", "1.0", "-o", str(out), *TINY])
    assert code == 0
    assert len(load_cloud(out)) == 300


def test_accumulate_bad_reference_exits_2(tmp_path):
    path = tmp_path / "f.xyz"
    save_cloud(PointCloud(np.ones((4, 3))), path)
    assert main(["accumulate", str(path), str(path), "--reference", "5", "-o", str(tmp_path / "d.xyz"), *TINY]) == 2


def test_config_file_sets_defaults_but_flags_win(tmp_path):
    cfg = tmp_path / "run.env"
    cfg.write_text("max_iters=7\nloss=cd\nsquared=true\nwidth=16\n")
    args = parse_args(["--config", str(cfg), "flow", "a.xyz", "b.xyz", "-o", "e.xyz", "--loss", "dt"])
    assert args.max_iters == 7
    assert args.width == 16
    assert args.squared is True
    assert args.loss == "dt"


@pytest.mark.parametrize("content", ["bogus=1\n", "loss=l2\n", "max_iters=zero\n"])
def test_bad_config_file_exits_2(tmp_path, content):
    cfg = tmp_path / "run.env"
    cfg.write_text(content)
    assert main(["--config", str(cfg), "flow", "a.xyz", "b.xyz", "-o", "e.xyz"]) == 2
