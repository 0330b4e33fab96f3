"""Tests for the benchmark harness, the grid ablation and result persistence."""

import pytest
from sqlmodel import Session

from fnsf import bench, dt, repo
from fnsf.config import config
from fnsf.errors import UsageError
from fnsf.records import SceneConfig
from fnsf.solver import SolveConfig


def _scene_cfg(points: int = 200) -> SceneConfig:
    return SceneConfig(points=points, static_boxes=2, extent=(10.0, 10.0, 3.0))


def _base(**overrides) -> SolveConfig:
    values = dict(width=8, depth=2, max_iters=3, cell=0.5, voxel=2.0)
    values.update(overrides)
    return SolveConfig(**values)


def test_method_config_sets_loss_and_model():
    cfg = bench.method_config("cd-linear", _base())
    assert (cfg.loss, cfg.model, cfg.width) == ("cd", "linear", 8)
    with pytest.raises(UsageError):
        bench.method_config("dt-rbf", _base())


def test_synth_scene_ids():
    scenes = bench.synth_scenes(_scene_cfg(), [3, 4])
    assert [scene_id for scene_id, _ in scenes] == ["seed3-n200", "seed4-n200"]


@pytest.mark.asyncio
async def test_run_bench_produces_one_row_per_scene_and_method():
    scenes = bench.synth_scenes(_scene_cfg(), [0, 1])
    rows = await bench.run_bench(scenes, ["cd-mlp", "dt-linear"], _base(), workers=2)
    assert len(rows) == 4
    assert {(r["scene_id"], r["method"]) for r in rows} == {
        (s, m) for s in ("seed0-n200", "seed1-n200") for m in ("cd-mlp", "dt-linear")
    }
    for row in rows:
        assert row["error"] == ""
        assert set(row) == set(bench.BENCH_COLUMNS)
        assert row["epe_m"] >= 0
        assert 0 <= row["acc5"] <= row["acc10"] <= 100
        assert row["pre_ms"] + row["query_ms_total"] + row["network_ms_total"] <= row["total_ms"]


@pytest.mark.asyncio
async def test_run_bench_turns_failures_into_rows():
    scenes = bench.synth_scenes(_scene_cfg(), [0])
    rows = await bench.run_bench(scenes, ["cd-mlp", "dt-mlp"], _base(memory_budget=1000))
    by_method = {r["method"]: r for r in rows}
    assert by_method["cd-mlp"]["error"] == ""
    assert by_method["dt-mlp"]["error"].startswith("BudgetError")
    assert by_method["dt-mlp"]["epe_m"] == ""
    assert by_method["dt-mlp"]["points"] == 200


@pytest.mark.asyncio
async def test_run_bench_rejects_unknown_method_up_front():
    with pytest.raises(UsageError):
        await bench.run_bench(bench.synth_scenes(_scene_cfg(), [0]), ["nsfp"], _base())


def test_worker_count_is_capped(monkeypatch):
    monkeypatch.setattr(config, "THREADS", 2)
    assert bench.worker_count(8) == 2
    assert bench.worker_count(1) == 1
    assert bench.worker_count() == 2
    with pytest.raises(UsageError):
        bench.worker_count(0)


def test_dedupe_cells():
    assert bench.dedupe_cells([0.5, 1.0, 0.5, 0.2]) == [1.0, 0.5, 0.2]
    with pytest.raises(UsageError):
        bench.dedupe_cells([])
    with pytest.raises(UsageError):
        bench.dedupe_cells([0.5, 0.0])


def test_ablation_rows_follow_cells():
    _, pair = bench.synth_scenes(_scene_cfg(), [2])[0]
    rows = bench.run_ablation(pair, [0.5, 1.0, 0.5], _base(model="linear"))
    assert [r["cell"] for r in rows] == [1.0, 0.5]
    assert rows[0]["memory_bytes"] < rows[1]["memory_bytes"]
    for row in rows:
        assert row["error"] == ""
        assert row["build_ms"] > 0
        assert row["epe_m"] >= 0


def test_ablation_over_budget_cell_is_an_error_row():
    _, pair = bench.synth_scenes(_scene_cfg(), [2])[0]
    coarse = dt.make_grid(pair.source, pair.target, 1.0, _base().margin, budget=1 << 62)
    budget = coarse.n_cells * dt.PEAK_BYTES_PER_CELL
    rows = bench.run_ablation(pair, [1.0, 0.5], _base(model="linear", memory_budget=budget))
    assert rows[0]["error"] == ""
    assert rows[1]["error"].startswith("BudgetError")
    assert rows[1]["memory_bytes"] == dt.memory_bytes(
        dt.make_grid(pair.source, pair.target, 0.5, _base().margin, budget=1 << 62)
    )


def _result(method: str, epe: float, scene: str = "seed0-n200") -> dict:
    return dict(scene_id=scene, method=method, epe_m=epe, acc5=50.0, acc10=75.0, total_ms=12.5, points=200)


def test_repo_upsert_and_queries():
    engine = repo.get_engine("sqlite://")
    with Session(engine) as session:
        first = repo.upsert_result(session, _result("dt-mlp", 0.3))
        assert first.id == "seed0-n200:dt-mlp"
        repo.upsert_result(session, _result("dt-mlp", 0.2))
        repo.upsert_result(session, _result("cd-mlp", 0.25))
        repo.upsert_result(session, {**_result("cd-mlp", 0.4, scene="seed1-n200"), "ignored": 1})

        rows = repo.get_all_results(session)
        assert len(rows) == 3
        dt_rows = repo.get_results_by_method(session, "dt-mlp")
        assert [r.epe_m for r in dt_rows] == [0.2]
        assert {r.scene_id for r in repo.get_results_by_method(session, "cd-mlp")} == {"seed0-n200", "seed1-n200"}
