"""Exact Euclidean distance-transform maps over a voxelized target cloud.

The map stores, for every cell center, the distance to the nearest occupied
cell center. It is built with the separable lower-envelope algorithm (one
exact 1D pass per axis on squared distances in cell units) and queried with
trilinear interpolation so the loss has a usable gradient.
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from fnsf.config import DEFAULT_CELL, DEFAULT_MARGIN, config
from fnsf.errors import BudgetError, DataIOError, UsageError
from fnsf.pointcloud import PointCloud, ensure_non_empty

logger = logging.getLogger(__name__)

DT_MAGIC = b"FDTM"
DT_VERSION = 1
_DT_HEADER = struct.Struct("<4sI3dd3Q")

# bool occupancy + f64 squared distances + f64 line copy of the pass in flight;
# per-chunk envelope buffers come on top and are bounded by _CHUNK_CELLS
PEAK_BYTES_PER_CELL = 17

# lines per chunk are chosen so one working array stays near this many cells
_CHUNK_CELLS = 1 << 22

# points up to this fraction of a cell past the upper face still count as inside
_FACE_TOL = 1e-6


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    cell: float
    dims: Tuple[int, int, int]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.cell


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    occupied: np.ndarray


@dataclass(frozen=True)
class DTMap:
    spec: GridSpec
    dist: np.ndarray   # float32, shape spec.dims, meters

    @property
    def memory_bytes(self) -> int:
        return self.dist.nbytes


@dataclass(frozen=True)
class DtQueryResult:
    value: float
    gradient: np.ndarray


def memory_bytes(spec: GridSpec) -> int:
    """Bytes held by the finished f32 map."""
    return spec.n_cells * 4


def make_grid(
    source: PointCloud,
    target: PointCloud,
    cell: float = DEFAULT_CELL,
    margin: float = DEFAULT_MARGIN,
    budget: Optional[int] = None,
) -> GridSpec:
    """Grid covering both clouds inflated by `margin`; dims = ceil(extent / cell)."""
    ensure_non_empty(source, "source")
    ensure_non_empty(target, "target")
    if not cell > 0:
        raise UsageError(f"cell must be > 0, got {cell}")
    if margin < 0:
        raise UsageError(f"margin must be >= 0, got {margin}")

    both = np.concatenate([source.points, target.points])
    low = both.min(axis=0) - margin
    high = both.max(axis=0) + margin
    dims = tuple(max(1, math.ceil(e / cell - 1e-9)) for e in (high - low))
    spec = GridSpec(origin=low, cell=float(cell), dims=dims)

    budget = config.MEMORY_BUDGET if budget is None else budget
    required = spec.n_cells * PEAK_BYTES_PER_CELL
    if required > budget:
        raise BudgetError(
            f"DT grid {dims} at cell {cell} m needs {required} bytes, budget is {budget}",
            required_bytes=required,
        )
    return spec


def rasterize(target: PointCloud, spec: GridSpec) -> OccupancyGrid:
    """Mark the cell floor((p - origin) / cell) of every target point."""
    dims = np.asarray(spec.dims)
    scaled = (target.points - spec.origin) / spec.cell
    index = np.floor(scaled).astype(np.int64)
    on_face = (index == dims) & (scaled <= dims + _FACE_TOL)
    index[on_face] = np.broadcast_to(dims - 1, index.shape)[on_face]

    outside = np.any((index < 0) | (index >= dims), axis=1)
    if outside.any():
        k = int(np.flatnonzero(outside)[0])
        raise UsageError(
            f"target point {k} at {target.points[k].tolist()} falls outside the grid (cell index {index[k].tolist()})"
        )

    occupied = np.zeros(spec.dims, dtype=bool)
    occupied[index[:, 0], index[:, 1], index[:, 2]] = True
    return OccupancyGrid(spec=spec, occupied=occupied)


def _envelope(f: np.ndarray) -> np.ndarray:
    """Squared EDT along axis 0 of an (n, lines) array of squared distances.

    Lower envelope of the parabolas f[j] + (i - j)^2, one envelope per
    column, built for all columns at once. +inf entries contribute no
    parabola; a column without any finite entry stays +inf.
    """
    n, lines = f.shape
    cols = np.arange(lines)
    v = np.zeros((n, lines), dtype=np.int64)    # parabola apexes
    z = np.full((n + 1, lines), np.inf)         # envelope breakpoints
    k = np.full(lines, -1, dtype=np.int64)      # index of the last parabola

    for q in range(n):
        fq = f[q]
        finite = np.isfinite(fq)
        if not finite.any():
            continue
        first = finite & (k < 0)
        if first.any():
            c = cols[first]
            k[c] = 0
            v[0, c] = q
            z[0, c] = -np.inf
            z[1, c] = np.inf
        pending = cols[finite & ~first]
        while pending.size:
            kp = k[pending]
            vp = v[kp, pending]
            s = ((fq[pending] + q * q) - (f[vp, pending] + vp * vp)) / (2.0 * (q - vp))
            pop = s <= z[kp, pending]
            done = pending[~pop]
            kd = kp[~pop] + 1
            k[done] = kd
            v[kd, done] = q
            z[kd, done] = s[~pop]
            z[kd + 1, done] = np.inf
            k[pending[pop]] -= 1
            pending = pending[pop]

    out = np.full((n, lines), np.inf)
    has = k >= 0
    if not has.any():
        return out
    c = cols[has]
    kk = np.zeros(c.size, dtype=np.int64)
    for q in range(n):
        while True:
            step = z[kk + 1, c] < q
            if not step.any():
                break
            kk[step] += 1
        vq = v[kk, c]
        out[q, c] = (q - vq) ** 2 + f[vq, c]
    return out


def edt1d(f: Sequence[float]) -> np.ndarray:
    """out[i] = min_j f[j] + (i - j)^2 (exact; +inf means no site on the line)."""
    f = np.asarray(f, dtype=np.float64).reshape(-1, 1)
    if f.shape[0] == 0:
        return np.zeros(0)
    return _envelope(f)[:, 0]


def _axis_pass(sq: np.ndarray, axis: int, workers: int) -> np.ndarray:
    moved = np.moveaxis(sq, axis, 0)
    shape = moved.shape
    lines = np.ascontiguousarray(moved.reshape(shape[0], -1))
    width = max(1, _CHUNK_CELLS // max(1, shape[0]))
    chunks = [(lo, min(lo + width, lines.shape[1])) for lo in range(0, lines.shape[1], width)]

    def run(bounds):
        lo, hi = bounds
        # chunks own disjoint columns, so results go straight back into `lines`
        lines[:, lo:hi] = _envelope(lines[:, lo:hi])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for bounds in chunks:
            run(bounds)
    return np.moveaxis(lines.reshape(shape), 0, axis)


def edt_axes(occ: OccupancyGrid, order: Sequence[int] = (0, 1, 2), workers: Optional[int] = None) -> np.ndarray:
    """Squared distances in cell units after one envelope pass per axis in `order`.

    Values are integers held in float64, so any axis order gives identical results.
    """
    if sorted(order) != [0, 1, 2]:
        raise UsageError(f"axis order must be a permutation of (0, 1, 2), got {tuple(order)}")
    workers = config.THREADS if workers is None else max(1, workers)
    sq = np.where(occ.occupied, 0.0, np.inf)
    for axis in order:
        sq = _axis_pass(sq, axis, workers)
    return sq


def build_dt(occ: OccupancyGrid, workers: Optional[int] = None) -> DTMap:
    """Exact Euclidean DT (meters, f32) of an occupancy grid."""
    if not occ.occupied.any():
        raise UsageError("cannot build a distance transform without occupied cells")
    sq = edt_axes(occ, workers=workers)
    np.sqrt(sq, out=sq)
    sq *= occ.spec.cell
    dist = sq.astype(np.float32)
    logger.debug(f"built DT {occ.spec.dims} cell={occ.spec.cell} ({dist.nbytes} bytes)")
    return DTMap(spec=occ.spec, dist=dist)


def dt_brute_oracle(occ: OccupancyGrid) -> DTMap:
    """All-pairs nearest occupied cell; small grids only."""
    spec = occ.spec
    sites = np.argwhere(occ.occupied).astype(np.float64)
    cells = np.indices(spec.dims).reshape(3, -1).T.astype(np.float64)
    best = np.full(cells.shape[0], np.inf)
    if sites.size:
        step = max(1, (1 << 22) // max(1, sites.shape[0]))
        for lo in range(0, cells.shape[0], step):
            diff = cells[lo:lo + step, None, :] - sites[None, :, :]
            best[lo:lo + step] = np.min(np.sum(diff * diff, axis=2), axis=1)
    dist = (np.sqrt(best) * spec.cell).reshape(spec.dims).astype(np.float32)
    return DTMap(spec=spec, dist=dist)


def build_for_pair(
    source: PointCloud,
    target: PointCloud,
    cell: float = DEFAULT_CELL,
    margin: float = DEFAULT_MARGIN,
    budget: Optional[int] = None,
) -> DTMap:
    spec = make_grid(source, target, cell, margin, budget)
    return build_dt(rasterize(target, spec))


def query_many(dtmap: DTMap, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Trilinear DT values and their analytic gradients at many points.

    The interpolation lattice is the set of cell centers. Points outside it
    are clamped onto its boundary and get a zero gradient along the clamped
    axes.
    """
    spec = dtmap.spec
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(spec.dims)
    top = (dims - 1).astype(np.float64)

    u = (points - spec.origin) / spec.cell - 0.5
    free = (u >= 0) & (u <= top) & (dims > 1)
    u = np.clip(u, 0.0, top)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    t = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)

    d = dtmap.dist
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    c000 = d[x0, y0, z0].astype(np.float64)
    c100 = d[x1, y0, z0].astype(np.float64)
    c010 = d[x0, y1, z0].astype(np.float64)
    c110 = d[x1, y1, z0].astype(np.float64)
    c001 = d[x0, y0, z1].astype(np.float64)
    c101 = d[x1, y0, z1].astype(np.float64)
    c011 = d[x0, y1, z1].astype(np.float64)
    c111 = d[x1, y1, z1].astype(np.float64)

    tx, ty, tz = t.T
    sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz

    # interpolate along x, then y, then z
    e00 = sx * c000 + tx * c100
    e10 = sx * c010 + tx * c110
    e01 = sx * c001 + tx * c101
    e11 = sx * c011 + tx * c111
    g0 = sy * e00 + ty * e10
    g1 = sy * e01 + ty * e11
    value = sz * g0 + tz * g1

    grad = np.empty_like(points)
    grad[:, 0] = (sy * sz * (c100 - c000) + ty * sz * (c110 - c010)
                  + sy * tz * (c101 - c001) + ty * tz * (c111 - c011))
    grad[:, 1] = sz * (e10 - e00) + tz * (e11 - e01)
    grad[:, 2] = g1 - g0
    grad = np.where(free, grad / spec.cell, 0.0)
    return value, grad


def query(dtmap: DTMap, p) -> DtQueryResult:
    value, grad = query_many(dtmap, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return DtQueryResult(value=float(value[0]), gradient=grad[0])


def save_dt(dtmap: DTMap, path) -> None:
    """Debug dump: FDTM header, then f32 distances with x varying fastest."""
    spec = dtmap.spec
    header = _DT_HEADER.pack(DT_MAGIC, DT_VERSION, *map(float, spec.origin), spec.cell, *spec.dims)
    try:
        Path(path).write_bytes(header + dtmap.dist.astype("<f4").ravel(order="F").tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load_dt(path) -> DTMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _DT_HEADER.size:
        raise DataIOError(f"{path}: truncated DT header")
    magic, version, ox, oy, oz, cell, nx, ny, nz = _DT_HEADER.unpack_from(blob)
    if magic != DT_MAGIC or version != DT_VERSION:
        raise DataIOError(f"{path}: not an FDTM v{DT_VERSION} file")
    count = nx * ny * nz
    if len(blob) != _DT_HEADER.size + 4 * count:
        raise DataIOError(f"{path}: expected {count} distances")
    values = np.frombuffer(blob, dtype="<f4", offset=_DT_HEADER.size, count=count)
    spec = GridSpec(origin=np.array([ox, oy, oz]), cell=cell, dims=(nx, ny, nz))
    return DTMap(spec=spec, dist=values.reshape((nx, ny, nz), order="F").astype(np.float32))
