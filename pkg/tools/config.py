"""NoPeek configuration: numeric defaults, environment settings, session config file."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# ---------------------------------------------------------------------------
# Distance correlation
# ---------------------------------------------------------------------------

DCOR_EPS = 1e-7  # squared-distance floor before sqrt
DEGENERATE_VARIANCE = 1e-12  # dVarX * dVarZ below this is a constant sample

# ---------------------------------------------------------------------------
# Optimizer (Adam, exponential decay per epoch)
# ---------------------------------------------------------------------------

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_DECAY = 0.95

# ---------------------------------------------------------------------------
# NoPeek loss weights
# ---------------------------------------------------------------------------

ALPHA1 = 0.5
ALPHA2 = 1.0
BATCH_SIZE = 64

# ---------------------------------------------------------------------------
# Burn-in (device-level decorrelation)
# ---------------------------------------------------------------------------

BURNIN_ITERS = 100
BURNIN_GAMMA2 = 1.0
BURNIN_ALPHA = 1.0
BURNIN_BETA = 1.0
BURNIN_MAX_REJECTIONS = 30
BURNIN_PREFIT_STEPS = 200
BURNIN_SAMPLES = 128

# ---------------------------------------------------------------------------
# Reconstruction attacker budget
# ---------------------------------------------------------------------------

ATTACK_EPOCHS = 200
ATTACK_LR = 1e-3
ATTACK_BATCH = 32
ATTACK_TRAIN_FRACTION = 0.9

# ---------------------------------------------------------------------------
# Wire
# ---------------------------------------------------------------------------

WIRE_MAGIC = b"NPK1"
CHECKPOINT_MAGIC = b"NPKM"
PAIRS_MAGIC = b"NPKP"
CHECKPOINT_VERSION = 1

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 7341
MAX_SEED = 2**64 - 1

log = logging.getLogger("nopeek.config")


class ConfigError(Exception):
    """Raised when a session config file or value is invalid."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class Settings(BaseSettings):
    """Process-level settings read from NOPEEK_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="NOPEEK_", extra="ignore")

    log: str = "INFO"
    status_host: str = "127.0.0.1"
    status_port: int = 0  # 0 disables the HTTP status app
    checkpoint_dir: Path = Path(".nopeek")


class SessionConfig(BaseModel):
    """Everything a training session, burn-in run, or experiment needs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha1: float = Field(ALPHA1, ge=0.0)
    alpha2: float = Field(ALPHA2, ge=0.0)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(BATCH_SIZE, ge=2)
    split_index: int = Field(5, ge=1)
    lr: float = Field(ADAM_LR, gt=0.0)
    lr_decay: float = Field(LR_DECAY, gt=0.0, le=1.0)

    burnin_iters: int = Field(BURNIN_ITERS, ge=0)
    burnin_mode: Literal["off", "ascent", "mm"] = "off"
    burnin_samples: int = Field(BURNIN_SAMPLES, ge=3)
    burnin_beta: float = BURNIN_BETA

    noise_scale: float = Field(0.0, ge=0.0)
    seed: int = Field(0, ge=0, le=MAX_SEED)

    heads: tuple[str, ...] = ("class",)
    protect: str = ""
    skip_binary_protected: bool = False

    dataset: Literal["blobs", "stripes-image", "cifar10"] = "blobs"
    data_path: str = ""
    n_samples: int = Field(512, ge=4)
    hidden: tuple[int, ...] = (256, 64, 32)
    patch_kernel: int = Field(0, ge=0)  # >0: first client layer is locally connected
    patch_channels: int = Field(3, ge=1)

    attack_epochs: int = Field(ATTACK_EPOCHS, ge=1)
    attack_lr: float = Field(ATTACK_LR, gt=0.0)
    attack_batch: int = Field(ATTACK_BATCH, ge=1)
    leak_fraction: float = Field(1.0, gt=0.0, le=1.0)

    wire_dtype: Literal["f32", "f64"] = "f32"
    host: str = DEFAULT_HOST
    port: int = Field(DEFAULT_PORT, ge=0, le=65535)

    @field_validator("heads", "hidden", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_heads(self) -> SessionConfig:
        if not self.heads:
            raise ValueError("at least one head is required")
        if self.protect and self.protect in self.heads:
            raise ValueError(f"protected attribute {self.protect!r} is also a head")
        if len(self.hidden) != 3:
            raise ValueError("hidden must list three widths (two client, one server)")
        return self


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines. `#` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key)
        values[key] = value
    return values


def build_config(values: dict, **overrides) -> SessionConfig:
    """Validate raw values into a SessionConfig, mapping failures to ConfigError."""
    merged = {**values, **overrides}
    try:
        return SessionConfig(**merged)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first.get("loc", ())) or None
        raise ConfigError(f"invalid config: {first.get('msg')}", key=key) from e


def load_config(path: str | Path, **overrides) -> SessionConfig:
    """Read and validate a session config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = build_config(parse_config_text(text), **overrides)
    log.info("loaded config %s (seed=%d, alpha1=%.3g)", path, cfg.seed, cfg.alpha1)
    return cfg


def configure_logging(level: str | None = None) -> None:
    """Root logging setup shared by the CLI and the server process."""
    level = (level or Settings().log).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s | %(levelname)-7s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
