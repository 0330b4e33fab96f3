"""Point-cloud data model, file I/O and the seeded synthetic scene generator."""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from fnsf.errors import DataIOError, UsageError
from fnsf.records import MAX_ROTATION_DEG, MAX_TRANSLATION, MoverSpec, SceneConfig

logger = logging.getLogger(__name__)

MAGIC = b"FNSF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

FORMATS = ("text-xyz", "binary-f32")


def _frozen(array: np.ndarray, name: str) -> np.ndarray:
    data = np.array(array, dtype=np.float64, copy=True).reshape(-1, 3)
    if not np.all(np.isfinite(data)):
        raise UsageError(f"{name} contains non-finite values")
    data.flags.writeable = False
    return data


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points in meters, stored as an (N, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, "point cloud"))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0


@dataclass(frozen=True)
class FlowField:
    """Per-point 3D flow vectors (m), aligned 1:1 with a PointCloud."""

    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen(self.vectors, "flow field"))

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(frozen=True)
class ScenePair:
    source: PointCloud
    target: PointCloud
    gt_flow: Optional[FlowField] = None
    seed: int = 0
    descriptor: SceneConfig = field(default_factory=SceneConfig)
    # Owning body per source point: 0 = static background, k = mover k
    source_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gt_flow is not None and len(self.gt_flow) != len(self.source):
            raise UsageError(
                f"gt flow has {len(self.gt_flow)} vectors for {len(self.source)} source points"
            )


def ensure_non_empty(cloud: PointCloud, name: str = "cloud") -> None:
    if cloud.is_empty:
        raise UsageError(f"{name} is empty")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _format_float(value: float) -> str:
    # shortest decimal that round-trips, "1" rather than "1.0"
    return np.format_float_positional(value, trim="-")


def _read_text(path: Path) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc

    rows: List[Tuple[float, float, float]] = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataIOError(f"{path}:{lineno}: expected 3 values, found {len(parts)}")
        try:
            row = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise DataIOError(f"{path}:{lineno}: {exc}") from exc
        if not all(np.isfinite(row)):
            raise DataIOError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _read_binary(path: Path) -> np.ndarray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc

    if len(blob) < _HEADER.size:
        raise DataIOError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataIOError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataIOError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + count * 12
    if len(blob) != expected:
        raise DataIOError(f"{path}: expected {expected} bytes for {count} points, found {len(blob)}")

    values = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataIOError(f"{path}: non-finite value in record {bad[0] // 3 + 1}")
    return values.astype(np.float64).reshape(-1, 3)


def _read_array(path, fmt: str) -> np.ndarray:
    path = Path(path)
    if fmt == "text-xyz":
        return _read_text(path)
    if fmt == "binary-f32":
        return _read_binary(path)
    raise UsageError(f"unknown format {fmt!r}, expected one of {FORMATS}")


def _write_array(array: np.ndarray, path, fmt: str) -> None:
    path = Path(path)
    if fmt == "text-xyz":
        payload = "".join(" ".join(_format_float(v) for v in row) + "\n" for row in array)
        data = payload.encode("utf-8")
    elif fmt == "binary-f32":
        data = _HEADER.pack(MAGIC, VERSION, array.shape[0]) + array.astype("<f4").tobytes()
    else:
        raise UsageError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def guess_format(path) -> str:
    """`.xyz`/`.txt` files are text, everything else binary."""
    return "text-xyz" if Path(path).suffix.lower() in (".xyz", ".txt") else "binary-f32"


def load_cloud(path, fmt: Optional[str] = None) -> PointCloud:
    """Load a point cloud; point order is preserved from the file.

    An empty file yields an empty cloud; the solvers reject it later.
    """
    return PointCloud(_read_array(path, fmt or guess_format(path)))


def save_cloud(cloud: PointCloud, path, fmt: Optional[str] = None) -> None:
    _write_array(cloud.points, path, fmt or guess_format(path))


def load_flow(path, fmt: Optional[str] = None) -> FlowField:
    return FlowField(_read_array(path, fmt or guess_format(path)))


def save_flow(flow: FlowField, path, fmt: Optional[str] = None) -> None:
    _write_array(flow.vectors, path, fmt or guess_format(path))


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def bounds(cloud: PointCloud, pad: float = 0.0) -> Aabb:
    """Axis-aligned box around the cloud, inflated by `pad` meters on every side."""
    ensure_non_empty(cloud)
    if pad < 0:
        raise UsageError(f"pad must be >= 0, got {pad}")
    return Aabb(cloud.points.min(axis=0) - pad, cloud.points.max(axis=0) + pad)


def subsample(cloud: PointCloud, n: int, seed: int = 0) -> Tuple[PointCloud, np.ndarray]:
    """Uniform random subset of `n` points without replacement.

    Returns the subset and the indices into the input it was drawn from
    (ascending, so relative order is kept).
    """
    if n < 1:
        raise UsageError(f"subsample size must be >= 1, got {n}")
    total = len(cloud)
    if n >= total:
        return cloud, np.arange(total)
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(total, size=n, replace=False))
    return PointCloud(cloud.points[index]), index


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

# (face normal axis, sign); the bottom face is never sampled, ground is removed
_FACES = [(0, -1), (0, 1), (1, -1), (1, 1), (2, 1)]


def _sample_box_surface(rng: np.random.Generator, size, n: int) -> np.ndarray:
    """`n` points uniformly on the visible faces of a box centered at the origin."""
    size = np.asarray(size, dtype=np.float64)
    areas = np.array([np.prod(np.delete(size, axis)) for axis, _ in _FACES])
    face = rng.choice(len(_FACES), size=n, p=areas / areas.sum())
    local = (rng.random((n, 3)) - 0.5) * size
    for k, (axis, sign) in enumerate(_FACES):
        hit = face == k
        local[hit, axis] = sign * size[axis] / 2
    return local


def _yaw(degrees: float) -> np.ndarray:
    return Rotation.from_euler("z", degrees, degrees=True).as_matrix()


def _split_counts(total: int, parts: int) -> List[int]:
    if parts == 0:
        return []
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def _jittered(rng: np.random.Generator, n: int, jitter: float) -> int:
    if jitter == 0 or n == 0:
        return n
    return max(1, int(round(n * (1.0 + rng.uniform(-jitter, jitter)))))


def _random_movers(rng: np.random.Generator, cfg: SceneConfig) -> List[MoverSpec]:
    ex, ey, _ = cfg.extent
    movers = []
    for _ in range(cfg.movers):
        size = (rng.uniform(3.5, 5.5), rng.uniform(1.6, 2.2), rng.uniform(1.4, 2.0))
        center = (rng.uniform(-0.35, 0.35) * ex, rng.uniform(-0.35, 0.35) * ey, size[2] / 2)
        direction = rng.uniform(0, 2 * np.pi)
        distance = rng.uniform(0.25, 1.0) * cfg.max_translation
        movers.append(MoverSpec(
            center=center,
            size=size,
            heading_deg=float(np.degrees(direction)),
            yaw_deg=rng.uniform(-1.0, 1.0) * cfg.max_rotation_deg,
            translation=(distance * np.cos(direction), distance * np.sin(direction), 0.0),
        ))
    return movers


def _random_static_boxes(rng: np.random.Generator, cfg: SceneConfig) -> List[Tuple[np.ndarray, np.ndarray]]:
    ex, ey, ez = cfg.extent
    boxes = []
    for _ in range(cfg.static_boxes):
        size = np.array([rng.uniform(1.0, 12.0), rng.uniform(1.0, 12.0), rng.uniform(1.0, ez)])
        center = np.array([rng.uniform(-0.5, 0.5) * ex, rng.uniform(-0.5, 0.5) * ey, size[2] / 2])
        boxes.append((center, size))
    return boxes


def _validate(cfg: SceneConfig) -> None:
    vectors = [cfg.extent, cfg.ego_translation]
    for spec in cfg.mover_specs:
        vectors += [spec.center, spec.size, spec.translation, (spec.heading_deg, spec.yaw_deg, 0.0)]
    if not all(np.all(np.isfinite(v)) for v in vectors):
        raise UsageError("scene config contains non-finite motion or geometry")
    if min(cfg.points, cfg.movers, cfg.static_boxes) < 0 or cfg.noise < 0:
        raise UsageError("scene config counts and noise must be non-negative")
    _check_motion(cfg.mover_specs)


def _check_motion(movers: List[MoverSpec]) -> None:
    if any(abs(s.yaw_deg) > MAX_ROTATION_DEG + 1e-9 for s in movers):
        raise UsageError(f"mover rotation is limited to {MAX_ROTATION_DEG:g} degrees")
    if any(np.linalg.norm(s.translation) > MAX_TRANSLATION + 1e-9 for s in movers):
        raise UsageError(f"mover translation is limited to {MAX_TRANSLATION:g} m")


def mover_motion(spec: MoverSpec, ego=(0.0, 0.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Rigid motion (R, t) of a mover in sensor coordinates: p -> R p + t."""
    rotation = _yaw(spec.yaw_deg)
    center = np.asarray(spec.center, dtype=np.float64)
    shift = center - rotation @ center + np.asarray(spec.translation) - np.asarray(ego)
    return rotation, shift


def _stepped(spec: MoverSpec, k: int) -> MoverSpec:
    """Pose of a constant-velocity mover after `k` steps."""
    center = np.asarray(spec.center) + k * np.asarray(spec.translation)
    return spec.model_copy(update={
        "center": tuple(float(c) for c in center),
        "heading_deg": spec.heading_deg + k * spec.yaw_deg,
    })


class _Scene:
    """Resolved layout (static boxes + movers) and a frame sampler over one RNG stream."""

    def __init__(self, cfg: SceneConfig, seed: int):
        _validate(cfg)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.movers = list(cfg.mover_specs) or _random_movers(self.rng, cfg)
        _check_motion(self.movers)
        self.statics = _random_static_boxes(self.rng, cfg)
        self.descriptor = cfg.model_copy(update={"mover_specs": self.movers, "movers": len(self.movers)})

        mover_total = int(round(cfg.points * cfg.mover_fraction)) if self.movers else 0
        self.mover_counts = _split_counts(mover_total, len(self.movers))
        self.background_count = cfg.points - mover_total

    def _background(self, n: int) -> np.ndarray:
        rng = self.rng
        if n == 0:
            return np.zeros((0, 3))
        if not self.statics:
            extent = np.asarray(self.cfg.extent, dtype=np.float64)
            low = np.array([-extent[0] / 2, -extent[1] / 2, 0.0])
            return low + rng.random((n, 3)) * extent
        areas = np.array([2 * (s[0] * s[2] + s[1] * s[2]) + s[0] * s[1] for _, s in self.statics])
        owner = rng.choice(len(self.statics), size=n, p=areas / areas.sum())
        out = np.empty((n, 3))
        for k, (center, size) in enumerate(self.statics):
            hit = owner == k
            out[hit] = _sample_box_surface(rng, size, int(hit.sum())) + center
        return out

    def _noisy(self, pts: np.ndarray) -> np.ndarray:
        if self.cfg.noise == 0 or pts.shape[0] == 0:
            return pts
        return pts + self.rng.normal(0.0, self.cfg.noise, size=pts.shape)

    def frame(self, k: int, jitter: bool) -> Tuple[np.ndarray, np.ndarray]:
        """Sample frame `k` in its own sensor coordinates; returns (points, owner labels)."""
        count = (lambda n: _jittered(self.rng, n, self.cfg.count_jitter)) if jitter else (lambda n: n)
        n_bg = count(self.background_count)
        parts = [self._noisy(self._background(n_bg))]
        labels = [np.zeros(n_bg, dtype=np.int64)]
        for label, (spec, n) in enumerate(zip(self.movers, self.mover_counts), 1):
            pose = _stepped(spec, k)
            n = count(n)
            local = _sample_box_surface(self.rng, pose.size, n)
            parts.append(self._noisy(local @ _yaw(pose.heading_deg).T + np.asarray(pose.center)))
            labels.append(np.full(n, label, dtype=np.int64))
        ego = k * np.asarray(self.cfg.ego_translation, dtype=np.float64)
        return np.concatenate(parts).reshape(-1, 3) - ego, np.concatenate(labels)

    def advance(self, points: np.ndarray, labels: np.ndarray, start: int, steps: int) -> np.ndarray:
        """Exact positions of frame-`start` points after `steps` frames, in the final frame's coordinates."""
        ego = np.asarray(self.cfg.ego_translation, dtype=np.float64)
        world = np.array(points, dtype=np.float64) + start * ego
        for j in range(start, start + steps):
            for label, spec in enumerate(self.movers, 1):
                hit = labels == label
                rotation, shift = mover_motion(_stepped(spec, j))
                world[hit] = world[hit] @ rotation.T + shift
        return world - (start + steps) * ego


def synth_scene(cfg: SceneConfig, seed: int) -> ScenePair:
    """Generate a source/target pair with exact ground-truth flow.

    Static background sits on the faces of random boxes (or fills the scene
    volume when there are none); movers are boxes moving rigidly. The target
    is re-sampled independently, so no target point corresponds to a source
    point and counts may differ.
    """
    scene = _Scene(cfg, seed)
    source, labels = scene.frame(0, jitter=False)
    target, _ = scene.frame(1, jitter=True)

    flow = np.tile(-np.asarray(cfg.ego_translation, dtype=np.float64), (source.shape[0], 1))
    for label, spec in enumerate(scene.movers, 1):
        hit = labels == label
        rotation, shift = mover_motion(spec, cfg.ego_translation)
        flow[hit] = source[hit] @ (rotation - np.eye(3)).T + shift

    logger.debug(f"synth seed={seed}: {source.shape[0]} source / {target.shape[0]} target points, {len(scene.movers)} movers")
    return ScenePair(
        source=PointCloud(source),
        target=PointCloud(target),
        gt_flow=FlowField(flow),
        seed=seed,
        descriptor=scene.descriptor,
        source_labels=labels,
    )


@dataclass(frozen=True)
class SceneSequence:
    frames: List[PointCloud]
    # gt_positions[k]: frame-0 points carried into frame k's coordinates
    gt_positions: List[np.ndarray]
    descriptor: SceneConfig
    seed: int = 0


def synth_sequence(cfg: SceneConfig, frames: int, seed: int) -> SceneSequence:
    """`frames` independently sampled frames of a constant-velocity scene.

    Every mover repeats its (yaw, translation) step each frame and the sensor
    repeats the ego translation.
    """
    if frames < 2:
        raise UsageError("a sequence needs at least 2 frames")
    scene = _Scene(cfg, seed)
    clouds, gt = [], []
    first, labels = scene.frame(0, jitter=False)
    for k in range(frames):
        points = first if k == 0 else scene.frame(k, jitter=True)[0]
        clouds.append(PointCloud(points))
        gt.append(scene.advance(first, labels, 0, k))
    return SceneSequence(frames=clouds, gt_positions=gt, descriptor=scene.descriptor, seed=seed)
