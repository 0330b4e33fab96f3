"""FNSF configuration: algorithm defaults and environment settings."""

import os
from dotenv import load_dotenv

load_dotenv()


# Algorithm defaults
DEFAULT_CELL = 0.1            # DT grid edge (m)
DEFAULT_MARGIN = 2.0          # DT grid padding around both clouds (m)
DEFAULT_TRUNC = 2.0           # Chamfer truncation threshold (m)
DEFAULT_WIDTH = 128
DEFAULT_DEPTH = 8
DEFAULT_LR = 8e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_MAX_ITERS = 1000
DEFAULT_PATIENCE = 30
DEFAULT_MIN_DELTA = 1e-4      # relative
DEFAULT_VOXEL = 2.0           # linear-model encoder grid edge (m)
DEFAULT_SIGMA_FACTOR = 2.0    # Gaussian width = factor * voxel
DEFAULT_TV_WEIGHT = 1.0
DEFAULT_SUBSAMPLE = 8192


def _int_env(key: str, default: int) -> int:
    raw = os.getenv(key, "")
    try:
        return int(raw) if raw.strip() else default
    except ValueError:
        return default


class Config:
    """Runtime configuration pulled from the environment (and an optional .env)."""

    THREADS: int = max(1, _int_env("FNSF_THREADS", os.cpu_count() or 1))

    # Dense DT allocations above this many bytes are refused
    MEMORY_BUDGET: int = _int_env("FNSF_MEMORY_BUDGET", 8 * 1024**3)

    LOG_LEVEL: str = os.getenv("FNSF_LOG_LEVEL", "INFO").upper()

    # Benchmark persistence
    DATABASE_URL: str = os.getenv("DATABASE_URL", "sqlite:///./fnsf_bench.db")


config = Config()
