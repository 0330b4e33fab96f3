"""Tests for the scene-flow metrics and per-method summaries."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnsf import metrics
from fnsf.errors import UsageError
from fnsf.pointcloud import FlowField


def test_epe_examples():
    assert metrics.epe([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]]) == 0.0
    assert metrics.epe([[1.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]]) == 1.0
    assert metrics.epe([[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]], np.zeros((2, 3))) == 3.5


@pytest.mark.parametrize("est, gt, strict, relaxed", [
    ([1.04, 0.0, 0.0], [1.0, 0.0, 0.0], 100.0, 100.0),     # small absolute error
    ([10.4, 0.0, 0.0], [10.0, 0.0, 0.0], 100.0, 100.0),    # 4% relative error
    ([0.59, 0.0, 0.0], [0.5, 0.0, 0.0], 0.0, 100.0),       # 0.09 m
    ([1.2, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0, 0.0),          # 0.2 m, 20%
    ([0.0, 0.04, 0.0], [0.0, 0.0, 0.0], 100.0, 100.0),     # zero ground truth
])
def test_accuracy_branches(est, gt, strict, relaxed):
    assert metrics.acc_strict([est], [gt]) == strict
    assert metrics.acc_relaxed([est], [gt]) == relaxed


def test_accuracy_is_a_percentage_of_points():
    est = [[1.04, 0.0, 0.0], [1.2, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]
    gt = [[1.0, 0.0, 0.0]] * 4
    assert metrics.acc_strict(est, gt) == 50.0


@pytest.mark.parametrize("est, expected", [
    ([2.0, 0.0, 0.0], 0.0),
    ([0.0, 1.0, 0.0], math.pi / 2),
    ([-1.0, 0.0, 0.0], math.pi),
])
def test_angle_examples(est, expected):
    assert metrics.angle_error([est], [[1.0, 0.0, 0.0]]) == pytest.approx(expected)


def test_zero_vectors_contribute_zero_angle():
    est = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    gt = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    assert metrics.angle_error(est, gt) == pytest.approx(math.pi / 4)


def test_mismatched_and_empty_inputs_rejected():
    with pytest.raises(UsageError):
        metrics.epe(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(UsageError):
        metrics.evaluate(np.zeros((0, 3)), np.zeros((0, 3)))


def test_evaluate_accepts_flow_fields():
    gt = FlowField(np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))
    report = metrics.evaluate(gt, gt)
    assert report.as_dict() == dict(epe_m=0.0, acc5_pct=100.0, acc10_pct=100.0, angle_err_rad=0.0, count=2)


_flows = st.integers(1, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=3 * n, max_size=3 * n),
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=3 * n, max_size=3 * n),
        st.randoms(use_true_random=False),
    )
)


@settings(max_examples=40, deadline=None)
@given(_flows)
def test_metrics_ignore_point_order(data):
    est, gt, rnd = data
    est, gt = np.reshape(est, (-1, 3)), np.reshape(gt, (-1, 3))
    order = list(range(len(est)))
    rnd.shuffle(order)
    a, b = metrics.evaluate(est, gt), metrics.evaluate(est[order], gt[order])
    assert a.epe_m == pytest.approx(b.epe_m, abs=1e-12)
    assert a.acc5_pct == pytest.approx(b.acc5_pct)
    assert a.acc10_pct == pytest.approx(b.acc10_pct)
    assert a.angle_err_rad == pytest.approx(b.angle_err_rad, abs=1e-12)
    assert a.acc5_pct <= a.acc10_pct
    assert 0.0 <= a.angle_err_rad <= math.pi


def _row(method, epe, total, error=""):
    row = {column: 1.0 for column in metrics.CSV_COLUMNS[2:]}
    row.update(scene_id="s", method=method, epe_m=epe, total_ms=total, error=error)
    return row


def test_summarize_groups_by_method_and_counts_failures():
    rows = [
        _row("dt-mlp", 0.1, 10.0),
        _row("dt-mlp", 0.3, 30.0),
        _row("cd-mlp", 0.2, 100.0),
        _row("cd-mlp", "", "", error="BudgetError: too big"),
    ]
    summary = {entry["method"]: entry for entry in metrics.summarize(rows)}
    assert list(summary) == ["cd-mlp", "dt-mlp"]
    assert summary["dt-mlp"]["epe_m"] == pytest.approx(0.2)
    assert summary["dt-mlp"]["total_ms"] == pytest.approx(20.0)
    assert summary["dt-mlp"]["scenes"] == 2
    assert summary["cd-mlp"]["scenes"] == 1
    assert summary["cd-mlp"]["failed"] == 1


def test_summarize_all_failed_gives_nan():
    summary = metrics.summarize([_row("dt-linear", "", "", error="NumericError: nan")])
    assert summary[0]["scenes"] == 0
    assert math.isnan(summary[0]["epe_m"])
