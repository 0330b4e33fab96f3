"""Tests for the distance-transform grid, builder and interpolated queries."""

import itertools
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import distance_transform_edt

from fnsf import dt, loss
from fnsf.errors import BudgetError, DataIOError, UsageError
from fnsf.pointcloud import PointCloud


def _occupancy(dims, fraction: float, seed: int, cell: float = 0.1) -> dt.OccupancyGrid:
    rng = np.random.default_rng(seed)
    occupied = rng.random(dims) < fraction
    if not occupied.any():
        occupied[tuple(rng.integers(0, d) for d in dims)] = True
    spec = dt.GridSpec(origin=np.zeros(3), cell=cell, dims=tuple(dims))
    return dt.OccupancyGrid(spec=spec, occupied=occupied)


def _target_map(cell: float = 0.1) -> dt.DTMap:
    rng = np.random.default_rng(11)
    target = PointCloud(rng.uniform(0.0, 2.0, size=(40, 3)))
    return dt.build_for_pair(target, target, cell=cell, margin=0.5)


def test_make_grid_dims_and_origin():
    source = PointCloud([[0.0, 0.0, 0.0]])
    target = PointCloud([[1.0, 1.0, 1.0]])
    spec = dt.make_grid(source, target, cell=0.5, margin=0.0)
    assert spec.dims == (2, 2, 2)
    assert spec.origin.tolist() == [0.0, 0.0, 0.0]

    padded = dt.make_grid(source, target, cell=0.5, margin=1.0)
    assert padded.dims == (6, 6, 6)
    assert padded.origin.tolist() == [-1.0, -1.0, -1.0]


def test_make_grid_degenerate_extent_keeps_one_cell():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    assert dt.make_grid(cloud, cloud, cell=0.1, margin=0.0).dims == (1, 1, 1)


def test_make_grid_rejects_bad_parameters():
    cloud = PointCloud([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    with pytest.raises(UsageError):
        dt.make_grid(cloud, cloud, cell=0.0)
    with pytest.raises(UsageError):
        dt.make_grid(cloud, cloud, margin=-1.0)
    with pytest.raises(UsageError):
        dt.make_grid(PointCloud(np.zeros((0, 3))), cloud)


def test_make_grid_budget():
    cloud = PointCloud([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    with pytest.raises(BudgetError) as info:
        dt.make_grid(cloud, cloud, cell=0.1, margin=0.0, budget=1000)
    assert info.value.required_bytes == 10 * 10 * 10 * dt.PEAK_BYTES_PER_CELL
    assert info.value.exit_code == 5


def test_rasterize_includes_upper_face_and_rejects_outside():
    spec = dt.GridSpec(origin=np.zeros(3), cell=0.5, dims=(2, 2, 2))
    occ = dt.rasterize(PointCloud([[1.0, 1.0, 1.0], [0.1, 0.1, 0.1]]), spec)
    assert occ.occupied[1, 1, 1] and occ.occupied[0, 0, 0]
    assert occ.occupied.sum() == 2
    with pytest.raises(UsageError, match="outside"):
        dt.rasterize(PointCloud([[1.2, 0.0, 0.0]]), spec)


@pytest.mark.parametrize("f, expected", [
    ([np.inf, 0.0, np.inf, np.inf], [1.0, 0.0, 1.0, 4.0]),
    ([0.0, np.inf, np.inf, 0.0], [0.0, 1.0, 1.0, 0.0]),
    ([5.0, 0.0], [1.0, 0.0]),
    ([np.inf, np.inf], [np.inf, np.inf]),
])
def test_edt1d_examples(f, expected):
    assert dt.edt1d(f).tolist() == expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.one_of(st.just(np.inf), st.integers(0, 50).map(float)), min_size=1, max_size=30))
def test_edt1d_matches_brute_force(f):
    i = np.arange(len(f))
    brute = np.min(np.asarray(f)[None, :] + (i[:, None] - i[None, :]) ** 2, axis=1)
    assert np.array_equal(dt.edt1d(f), brute)


@pytest.mark.parametrize("seed", range(12))
def test_build_dt_matches_brute_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(1, 14, size=3))
    occ = _occupancy(dims, fraction=float(rng.uniform(0.002, 0.2)), seed=seed)
    fast, brute = dt.build_dt(occ), dt.dt_brute_oracle(occ)
    assert np.max(np.abs(fast.dist - brute.dist)) <= 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_build_dt_matches_scipy(seed):
    occ = _occupancy((20, 17, 9), fraction=0.01, seed=seed, cell=0.25)
    expected = distance_transform_edt(~occ.occupied, sampling=0.25)
    np.testing.assert_allclose(dt.build_dt(occ).dist, expected, atol=1e-5)


def test_single_site_distance_is_euclidean():
    occ = _occupancy((9, 9, 9), fraction=0.0, seed=0)
    occ.occupied[:] = False
    occ.occupied[4, 4, 4] = True
    dist = dt.build_dt(occ).dist
    assert dist[4, 4, 4] == 0.0
    assert dist[0, 0, 0] == pytest.approx(np.sqrt(48) * 0.1, abs=1e-6)
    assert dist[4, 4, 8] == pytest.approx(0.4, abs=1e-6)


def test_axis_order_does_not_change_result():
    occ = _occupancy((11, 7, 13), fraction=0.03, seed=5)
    results = [dt.edt_axes(occ, order=order) for order in itertools.permutations(range(3))]
    for other in results[1:]:
        assert np.array_equal(results[0], other)
    with pytest.raises(UsageError):
        dt.edt_axes(occ, order=(0, 0, 1))


def test_worker_count_does_not_change_result(monkeypatch):
    monkeypatch.setattr(dt, "_CHUNK_CELLS", 64)
    occ = _occupancy((16, 16, 16), fraction=0.01, seed=2)
    assert np.array_equal(dt.build_dt(occ, workers=1).dist, dt.build_dt(occ, workers=4).dist)


def test_empty_occupancy_rejected():
    occ = _occupancy((4, 4, 4), fraction=0.0, seed=0)
    occ.occupied[:] = False
    with pytest.raises(UsageError):
        dt.build_dt(occ)


def test_query_at_cell_centers_returns_stored_value():
    dtmap = _target_map()
    for index in [(3, 4, 5), (10, 2, 7), (1, 1, 1)]:
        result = dt.query(dtmap, dtmap.spec.center(index))
        assert result.value == pytest.approx(float(dtmap.dist[index]), abs=1e-9)


def test_query_zero_at_target_points_on_centers():
    spec = dt.GridSpec(origin=np.zeros(3), cell=0.2, dims=(10, 10, 10))
    target = PointCloud(np.array([spec.center((2, 3, 4)), spec.center((7, 7, 1))]))
    dtmap = dt.build_dt(dt.rasterize(target, spec))
    values, _ = dt.query_many(dtmap, target.points)
    np.testing.assert_allclose(values, 0.0, atol=1e-12)


def test_query_gradient_matches_finite_differences():
    dtmap = _target_map()
    rng = np.random.default_rng(1)
    spec = dtmap.spec
    index = rng.integers(2, np.asarray(spec.dims) - 3, size=(25, 3))
    frac = rng.uniform(0.1, 0.9, size=(25, 3))
    points = spec.origin + (index + 0.5 + frac) * spec.cell
    _, grad = dt.query_many(dtmap, points)

    h = 1e-6
    numeric = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        plus, _ = dt.query_many(dtmap, points + step)
        minus, _ = dt.query_many(dtmap, points - step)
        numeric[:, axis] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-7)


def test_query_outside_is_clamped_with_zero_gradient():
    dtmap = _target_map()
    spec = dtmap.spec
    inside = spec.center((0, 5, 5)) + np.array([0.0, 0.03, 0.02])
    outside = inside - np.array([5.0, 0.0, 0.0])
    a, b = dt.query(dtmap, inside), dt.query(dtmap, outside)
    assert b.value == pytest.approx(a.value, abs=1e-12)
    assert b.gradient[0] == 0.0
    assert np.all(np.isfinite(b.gradient))


@pytest.mark.parametrize("offset", [0.0, 0.5])
def test_query_is_continuous_across_cell_boundaries(offset):
    # offset 0.0 crosses cell faces, 0.5 crosses the planes through cell centers
    dtmap = _target_map()
    spec = dtmap.spec
    rng = np.random.default_rng(12)
    for axis in range(3):
        index = rng.integers(2, spec.dims[axis] - 3, size=30)
        points = spec.origin + rng.uniform(0.2, 0.8, size=(30, 3)) * np.asarray(spec.dims) * spec.cell
        points[:, axis] = spec.origin[axis] + (index + offset) * spec.cell
        below, above = points.copy(), points.copy()
        below[:, axis] -= 1e-9
        above[:, axis] += 1e-9
        a, _ = dt.query_many(dtmap, below)
        b, _ = dt.query_many(dtmap, above)
        assert np.max(np.abs(a - b)) <= 1e-6


def test_query_error_shrinks_as_cells_refine():
    rng = np.random.default_rng(13)
    target = PointCloud(rng.uniform(0.0, 4.0, size=(200, 3)))
    queries = np.clip(target.points[rng.integers(0, 200, size=500)] + rng.normal(scale=0.3, size=(500, 3)), 0.0, 4.0)
    _, d2 = loss.brute_nearest(queries, target.points)
    exact = np.sqrt(d2)
    errors = []
    for cell in (1.0, 0.5, 0.2, 0.1):
        dtmap = dt.build_for_pair(PointCloud(queries), target, cell=cell, margin=1.0)
        values, _ = dt.query_many(dtmap, queries)
        errors.append(float(np.mean(np.abs(values - exact))))
    assert all(fine <= coarse for coarse, fine in zip(errors, errors[1:]))
    assert errors[-1] < errors[0]


def test_build_peak_memory_stays_within_budget_constant(monkeypatch):
    monkeypatch.setattr(dt, "_CHUNK_CELLS", 1 << 10)
    occ = _occupancy((48, 48, 48), fraction=0.001, seed=3)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        baseline, _ = tracemalloc.get_traced_memory()
        dtmap = dt.build_dt(occ, workers=1)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    # occupancy already exists before the build, so the bound covers it too
    assert peak - baseline <= occ.spec.n_cells * dt.PEAK_BYTES_PER_CELL
    assert dtmap.memory_bytes <= peak - baseline


def test_memory_grows_as_cells_shrink():
    cloud = PointCloud([[0.0, 0.0, 0.0], [4.0, 3.0, 1.0]])
    sizes = [dt.memory_bytes(dt.make_grid(cloud, cloud, cell)) for cell in (1.0, 0.5, 0.2, 0.1)]
    assert sizes == sorted(sizes) and len(set(sizes)) == 4


def test_map_memory_matches_spec_estimate():
    dtmap = _target_map(cell=0.2)
    assert dtmap.memory_bytes == dt.memory_bytes(dtmap.spec)


def test_save_and_load_round_trip(tmp_path):
    dtmap = _target_map(cell=0.2)
    path = tmp_path / "map.fdtm"
    dt.save_dt(dtmap, path)
    loaded = dt.load_dt(path)
    assert loaded.spec.dims == dtmap.spec.dims
    assert loaded.spec.cell == dtmap.spec.cell
    assert np.array_equal(loaded.spec.origin, dtmap.spec.origin)
    assert np.array_equal(loaded.dist, dtmap.dist)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.fdtm"
    path.write_bytes(b"not a map")
    with pytest.raises(DataIOError):
        dt.load_dt(path)
