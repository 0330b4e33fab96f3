"""Flow models with hand-written reverse-mode gradients, plus Adam.

Two families map a point to a 3D flow vector:

* the coordinate MLP (ReLU hidden layers, linear output);
* the linear model over a complex positional encoding: per-axis shift
  encodings of a virtual voxel grid combined by Kronecker structure,
  evaluated with n-mode products and blended trilinearly to each point.
"""

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fnsf.config import (
    DEFAULT_BETAS,
    DEFAULT_DEPTH,
    DEFAULT_EPS,
    DEFAULT_LR,
    DEFAULT_SIGMA_FACTOR,
    DEFAULT_VOXEL,
    DEFAULT_WIDTH,
)
from fnsf.errors import DataIOError, NumericError, UsageError
from fnsf.pointcloud import FlowField, PointCloud, bounds

TV_EPS = 1e-12

CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1


def _as_points(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Coordinate MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpParams:
    """Weights are (fan_in, fan_out); layer l computes x @ W[l] + b[l]."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    def arrays(self) -> List[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return cls(weights=tuple(arrays[0::2]), biases=tuple(arrays[1::2]))


@dataclass
class MlpTape:
    params: MlpParams
    # inputs to every layer; hidden ones are post-ReLU, so > 0 marks active units
    inputs: List[np.ndarray]


def mlp_layer_sizes(width: int, depth: int) -> List[int]:
    """3 -> width x (layers - 1) -> 3 with max(depth, 2) affine layers."""
    layers = max(depth, 2)
    return [3] + [width] * (layers - 1) + [3]


def mlp_param_count(width: int, depth: int) -> int:
    sizes = mlp_layer_sizes(width, depth)
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def mlp_init(width: int = DEFAULT_WIDTH, depth: int = DEFAULT_DEPTH, seed: int = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if width < 1 or depth < 1:
        raise UsageError(f"MLP width and depth must be >= 1, got {width}x{depth}")
    rng = np.random.default_rng(seed)
    sizes = mlp_layer_sizes(width, depth)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


def mlp_apply(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpTape]:
    inputs = []
    h = x
    last = params.depth - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if layer < last:
            np.maximum(h, 0.0, out=h)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation in MLP layer {layer}", where=layer)
    return h, MlpTape(params=params, inputs=inputs)


def mlp_forward(params: MlpParams, points) -> Tuple[FlowField, MlpTape]:
    flow, tape = mlp_apply(params, _as_points(points))
    return FlowField(flow), tape


def mlp_backward(tape: MlpTape, dflow) -> MlpParams:
    """Gradient of sum_i dflow_i . f_i with respect to every weight and bias."""
    delta = np.asarray(dflow, dtype=np.float64)
    params = tape.params
    if len(tape.inputs) != params.depth or delta.shape != (tape.inputs[0].shape[0], 3):
        raise UsageError(f"tape does not match: dflow {delta.shape}, {len(tape.inputs)} recorded layers")
    gw: List[np.ndarray] = [None] * params.depth
    gb: List[np.ndarray] = [None] * params.depth
    for layer in range(params.depth - 1, -1, -1):
        a = tape.inputs[layer]
        gw[layer] = a.T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (a > 0)
    return MlpParams(weights=tuple(gw), biases=tuple(gb))


# ---------------------------------------------------------------------------
# Complex positional encoding + linear model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    """Virtual grid points per axis, uniformly spaced by `voxel` meters."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    voxel: float = DEFAULT_VOXEL
    sigma: float = DEFAULT_SIGMA_FACTOR * DEFAULT_VOXEL
    kind: str = "gaussian"   # or "triangle"

    def __post_init__(self):
        if not self.sigma > 0:
            raise UsageError(f"encoder width must be > 0, got {self.sigma}")
        if self.kind not in ("gaussian", "triangle"):
            raise UsageError(f"unknown encoding {self.kind!r}")
        for name in "xyz":
            axis = np.asarray(getattr(self, name), dtype=np.float64)
            if axis.ndim != 1 or axis.size == 0:
                raise UsageError(f"encoder axis {name} must be a non-empty 1D array")
            if axis.size > 1 and not np.allclose(np.diff(axis), self.voxel, rtol=1e-9, atol=1e-9):
                raise UsageError(f"encoder axis {name} must be spaced by the voxel edge {self.voxel}")
            object.__setattr__(self, name, axis)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.x.size, self.y.size, self.z.size)

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])


@dataclass(frozen=True)
class LinearParams:
    W: np.ndarray   # (Wx, Wy, Wz, 3)


@dataclass(frozen=True)
class BlendEntry:
    indices: np.ndarray   # (8, 3) grid-vertex indices
    weights: np.ndarray   # (8,)


@dataclass
class LinearTape:
    params: LinearParams
    spec: EncoderSpec
    corners: np.ndarray   # (N, 8) flat vertex indices
    weights: np.ndarray   # (N, 8)
    encodings: Tuple[np.ndarray, np.ndarray, np.ndarray]


def encoder_for(
    cloud: PointCloud,
    voxel: float = DEFAULT_VOXEL,
    sigma: Optional[float] = None,
    pad: float = 0.0,
    kind: str = "gaussian",
) -> EncoderSpec:
    """Virtual grid covering `cloud` (inflated by `pad`), at least 2 vertices per axis."""
    if not voxel > 0:
        raise UsageError(f"voxel must be > 0, got {voxel}")
    box = bounds(cloud, pad)
    axes = []
    for lo, extent in zip(box.min, box.extent):
        count = max(2, math.ceil(extent / voxel - 1e-9) + 1)
        axes.append(lo + voxel * np.arange(count))
    sigma = DEFAULT_SIGMA_FACTOR * voxel if sigma is None else sigma
    return EncoderSpec(x=axes[0], y=axes[1], z=axes[2], voxel=voxel, sigma=sigma, kind=kind)


def gaussian_encode(coords, grid, sigma: float) -> np.ndarray:
    """(i, j) -> exp(-(coords[i] - grid[j])^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise UsageError(f"sigma must be > 0, got {sigma}")
    shift = np.asarray(coords, dtype=np.float64)[:, None] - np.asarray(grid, dtype=np.float64)[None, :]
    return np.exp(-(shift * shift) / (2.0 * sigma * sigma))


def triangle_encode(coords, grid, width: float) -> np.ndarray:
    """(i, j) -> max(0, 1 - |coords[i] - grid[j]| / width)."""
    if not width > 0:
        raise UsageError(f"width must be > 0, got {width}")
    shift = np.abs(np.asarray(coords, dtype=np.float64)[:, None] - np.asarray(grid, dtype=np.float64)[None, :])
    return np.maximum(0.0, 1.0 - shift / width)


def axis_encodings(spec: EncoderSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encoding of each axis' virtual grid points, (W_a, W_a) per axis."""
    encode = gaussian_encode if spec.kind == "gaussian" else triangle_encode
    return tuple(encode(axis, axis, spec.sigma) for axis in (spec.x, spec.y, spec.z))


def combined_encoding(spec: EncoderSpec) -> np.ndarray:
    """Materialized Kronecker encoding of all vertices (small grids only)."""
    ex, ey, ez = axis_encodings(spec)
    return np.kron(np.kron(ex, ey), ez)


def _blend(points: np.ndarray, spec: EncoderSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trilinear corners (N, 8, 3) and weights (N, 8); points are clamped into the grid."""
    dims = np.array(spec.shape)
    top = (dims - 1).astype(np.float64)
    u = np.clip((points - spec.origin) / spec.voxel, 0.0, top)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    t = u - i0
    i1 = np.minimum(i0 + 1, dims - 1)

    corners = np.empty((points.shape[0], 8, 3), dtype=np.int64)
    weights = np.ones((points.shape[0], 8))
    for c in range(8):
        for a in range(3):
            upper = (c >> (2 - a)) & 1
            corners[:, c, a] = i1[:, a] if upper else i0[:, a]
            weights[:, c] *= t[:, a] if upper else 1.0 - t[:, a]
    return corners, weights, i0


def blend_weights(p, spec: EncoderSpec) -> BlendEntry:
    corners, weights, _ = _blend(np.asarray(p, dtype=np.float64).reshape(1, 3), spec)
    return BlendEntry(indices=corners[0], weights=weights[0])


def grid_values(params: LinearParams, encodings) -> np.ndarray:
    """Flow at every virtual vertex: W x1 ex x2 ey x3 ez (n-mode products)."""
    ex, ey, ez = encodings
    g = np.tensordot(ex, params.W, axes=(1, 0))
    g = np.einsum("jb,ibkd->ijkd", ey, g)
    return np.einsum("kc,ijcd->ijkd", ez, g)


def _n_mode_transpose(grad_grid: np.ndarray, encodings) -> np.ndarray:
    ex, ey, ez = encodings
    g = np.tensordot(ex, grad_grid, axes=(0, 0))
    g = np.einsum("jb,ajkd->abkd", ey, g)
    return np.einsum("kc,abkd->abcd", ez, g)


def linear_init(spec: EncoderSpec) -> LinearParams:
    """Zero tensor: the model starts from zero flow everywhere."""
    return LinearParams(W=np.zeros(spec.shape + (3,)))


def linear_apply(params: LinearParams, spec: EncoderSpec, x: np.ndarray) -> Tuple[np.ndarray, LinearTape]:
    if params.W.shape != spec.shape + (3,):
        raise UsageError(f"W has shape {params.W.shape}, encoder expects {spec.shape + (3,)}")
    encodings = axis_encodings(spec)
    values = grid_values(params, encodings).reshape(-1, 3)
    corners, weights, _ = _blend(x, spec)
    flat = np.ravel_multi_index((corners[..., 0], corners[..., 1], corners[..., 2]), spec.shape)
    flow = np.einsum("nc,ncd->nd", weights, values[flat])
    if not np.isfinite(flow).all():
        raise NumericError("non-finite flow from the linear model")
    return flow, LinearTape(params=params, spec=spec, corners=flat, weights=weights, encodings=encodings)


def linear_flow(params: LinearParams, spec: EncoderSpec, points) -> Tuple[FlowField, LinearTape]:
    flow, tape = linear_apply(params, spec, _as_points(points))
    return FlowField(flow), tape


def grid_gradient(tape: LinearTape, dflow) -> np.ndarray:
    """Gradient with respect to the vertex flow values; non-zero only on blended corners."""
    dflow = np.asarray(dflow, dtype=np.float64)
    if dflow.shape != (tape.corners.shape[0], 3):
        raise UsageError(f"dflow has shape {dflow.shape}, tape recorded {tape.corners.shape[0]} points")
    grad = np.zeros((int(np.prod(tape.spec.shape)), 3))
    contrib = tape.weights[:, :, None] * dflow[:, None, :]
    for d in range(3):
        grad[:, d] = np.bincount(tape.corners.ravel(), weights=contrib[..., d].ravel(), minlength=grad.shape[0])
    return grad.reshape(tape.spec.shape + (3,))


def linear_backward(tape: LinearTape, dflow) -> LinearParams:
    return LinearParams(W=_n_mode_transpose(grid_gradient(tape, dflow), tape.encodings))


def linear_param_count(spec: EncoderSpec) -> int:
    return int(np.prod(spec.shape)) * 3


def tv_reg(params: LinearParams) -> Tuple[float, LinearParams]:
    """Isotropic total variation of W over its interior index triples.

    Each flow channel contributes sqrt(dx^2 + dy^2 + dz^2 + eps) - sqrt(eps)
    with forward differences dx = W[i] - W[i+1] (and likewise for y, z);
    the result is averaged over the (Wx-1)(Wy-1)(Wz-1) triples and the 3
    channels, so a constant W gives exactly 0.
    """
    W = params.W
    if min(W.shape[:3]) < 2:
        raise UsageError(f"TV needs at least 2 vertices per axis, W has shape {W.shape}")
    core = W[:-1, :-1, :-1]
    dx = core - W[1:, :-1, :-1]
    dy = core - W[:-1, 1:, :-1]
    dz = core - W[:-1, :-1, 1:]
    root = np.sqrt(dx * dx + dy * dy + dz * dz + TV_EPS)
    scale = 1.0 / (core.size)
    value = float((root - math.sqrt(TV_EPS)).sum() * scale)

    gx, gy, gz = dx / root * scale, dy / root * scale, dz / root * scale
    grad = np.zeros_like(W)
    grad[:-1, :-1, :-1] += gx + gy + gz
    grad[1:, :-1, :-1] -= gx
    grad[:-1, 1:, :-1] -= gy
    grad[:-1, :-1, 1:] -= gz
    return value, LinearParams(W=grad)


# ---------------------------------------------------------------------------
# Model wrappers used by the solver
# ---------------------------------------------------------------------------

class FlowModel:
    """A point -> flow map with a flat parameter list the optimizer can update."""

    kind = "abstract"

    def arrays(self) -> List[np.ndarray]:
        raise NotImplementedError

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "FlowModel":
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, tape, dflow) -> List[np.ndarray]:
        raise NotImplementedError

    def regularizer(self) -> Optional[Tuple[float, List[np.ndarray]]]:
        return None

    def evaluate(self, points) -> np.ndarray:
        """Flow at arbitrary positions; the models are continuous over space."""
        flow, _ = self.forward(_as_points(points))
        return flow


@dataclass(frozen=True)
class MlpFlow(FlowModel):
    params: MlpParams
    kind = "mlp"

    def arrays(self):
        return self.params.arrays()

    def with_arrays(self, arrays):
        return replace(self, params=MlpParams.from_arrays(arrays))

    def forward(self, x):
        return mlp_apply(self.params, x)

    def backward(self, tape, dflow):
        return mlp_backward(tape, dflow).arrays()


@dataclass(frozen=True)
class LinearFlow(FlowModel):
    params: LinearParams
    spec: EncoderSpec
    tv_weight: float = 0.0
    kind = "linear"

    def arrays(self):
        return [self.params.W]

    def with_arrays(self, arrays):
        return replace(self, params=LinearParams(W=arrays[0]))

    def forward(self, x):
        return linear_apply(self.params, self.spec, x)

    def backward(self, tape, dflow):
        return [linear_backward(tape, dflow).W]

    def regularizer(self):
        if self.tv_weight == 0 or min(self.spec.shape) < 2:
            return None
        value, grad = tv_reg(self.params)
        half = 0.5 * self.tv_weight
        return half * value, [half * grad.W]


def cost_estimate(model: FlowModel, n_points: int) -> int:
    """Multiply-adds per forward pass: N W^2 L for the MLP, 8N + 3 WxWyWz (Wx+Wy+Wz) for the linear model."""
    if isinstance(model, MlpFlow):
        return n_points * sum(w.size for w in model.params.weights)
    if isinstance(model, LinearFlow):
        wx, wy, wz = model.spec.shape
        return 8 * n_points + 3 * wx * wy * wz * (wx + wy + wz)
    raise UsageError(f"no cost model for {type(model).__name__}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Tuple[np.ndarray, ...] = ()
    v: Tuple[np.ndarray, ...] = ()
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS


def adam_init(params: Sequence[np.ndarray], lr: float = DEFAULT_LR, betas=DEFAULT_BETAS, eps: float = DEFAULT_EPS) -> AdamState:
    if not lr > 0:
        raise UsageError(f"learning rate must be > 0, got {lr}")
    zeros = tuple(np.zeros_like(p, dtype=np.float64) for p in params)
    return AdamState(step=0, m=zeros, v=tuple(z.copy() for z in zeros), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], AdamState]:
    """Bias-corrected Adam; returns new parameter arrays and the advanced state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("parameter, gradient and moment lists differ in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise UsageError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {k}", where=state.step)

    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, step=step, m=tuple(new_m), v=tuple(new_v))


# ---------------------------------------------------------------------------
# Checkpoints (debug only, no stability promise)
# ---------------------------------------------------------------------------

def save_checkpoint(arrays: Sequence[np.ndarray], path) -> None:
    """FCKP, version, array count, then per array: ndim, dims, little-endian f32 values."""
    chunks = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(arrays))]
    for a in arrays:
        chunks.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> List[np.ndarray]:
    try:
        blob = Path(path).read_bytes()
        magic, version, count = struct.unpack_from("<4sII", blob)
        if magic != CKPT_MAGIC or version != CKPT_VERSION:
            raise DataIOError(f"{path}: not an FCKP v{CKPT_VERSION} checkpoint")
        offset = struct.calcsize("<4sII")
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float64))
            offset += 4 * size
    except (OSError, struct.error, ValueError) as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays
