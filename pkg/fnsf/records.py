"""Record types for FNSF - generator descriptors, solve echoes, manifests and benchmark rows."""

import platform
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from sqlmodel import Field, SQLModel

from fnsf import __version__


Vec3 = Tuple[float, float, float]

# per-mover motion between consecutive frames
MAX_ROTATION_DEG = 15.0
MAX_TRANSLATION = 3.0


class MoverSpec(SQLModel):
    """One rigid body of a synthetic scene and its motion between the two frames."""

    center: Vec3
    size: Vec3 = (4.5, 2.0, 1.6)
    heading_deg: float = 0.0      # initial yaw of the box
    yaw_deg: float = 0.0          # rotation about the box center between frames
    translation: Vec3 = (0.0, 0.0, 0.0)


class SceneConfig(SQLModel):
    """Synthetic scene generator parameters."""

    points: int = Field(default=20_000, ge=0)
    movers: int = Field(default=1, ge=0)
    mover_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    static_boxes: int = Field(default=12, ge=0)
    extent: Vec3 = (40.0, 40.0, 4.0)
    max_translation: float = Field(default=3.0, ge=0.0, le=MAX_TRANSLATION)
    max_rotation_deg: float = Field(default=15.0, ge=0.0, le=MAX_ROTATION_DEG)
    ego_translation: Vec3 = (0.0, 0.0, 0.0)
    noise: float = Field(default=0.0, ge=0.0)
    count_jitter: float = Field(default=0.0, ge=0.0, lt=1.0)

    # Explicit movers override the random ones (and `movers`)
    mover_specs: List[MoverSpec] = Field(default_factory=list)


class SolveRecord(SQLModel):
    """Per-solve JSON record: config echo, metrics and the timing breakdown."""

    config: Dict[str, Any]
    iterations_run: int
    final_loss: float
    source_points: int
    target_points: int
    metrics: Optional[Dict[str, float]] = None
    pre_compute_ms: float
    loss_query_ms_mean: float
    loss_query_ms_total: float
    network_ms_mean: float
    network_ms_total: float
    total_ms: float


class RunManifest(SQLModel):
    """Written next to every output file."""

    command: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    version: str = __version__
    platform: str = Field(default_factory=lambda: f"{platform.platform()} / Python {sys.version.split()[0]}")
    timestamp: datetime = Field(default_factory=datetime.now)
    outputs: List[str] = Field(default_factory=list)


class BenchResult(SQLModel, table=True):
    """One benchmark row (scene x method), persisted by `fnsf bench --db`."""

    id: str = Field(primary_key=True)   # "<scene_id>:<method>"
    scene_id: str
    method: str
    points: int = 0
    epe_m: float = 0.0
    acc5: float = 0.0
    acc10: float = 0.0
    angle_rad: float = 0.0
    pre_ms: float = 0.0
    query_ms_total: float = 0.0
    network_ms_total: float = 0.0
    total_ms: float = 0.0
    error: str = ""
    created_at: datetime = Field(default_factory=datetime.now)
