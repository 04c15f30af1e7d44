"""
Configuration management for SpikingCSINet runs.

Process-level settings come from the environment (prefix ``SCSN_``) or a
``.env`` file. Experiment settings come from a flat ``key = value`` file
layered over a named profile.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type

from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

try:
    from .errors import ConfigError
    from .models import DataConfig, EnergyModel, LIFConfig, ModelConfig, SystemConfig, TrainConfig
except ImportError:
    from errors import ConfigError
    from models import DataConfig, EnergyModel, LIFConfig, ModelConfig, SystemConfig, TrainConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Application settings."""

    model_config = SettingsConfigDict(
        env_prefix="SCSN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field("INFO", description="Logging level")
    profile: str = Field("desk", description="Profile used when neither the config file nor the CLI names one")
    audit_workers: int = Field(1, ge=1, description="Threads used to shard firing measurement")
    metrics_flush: bool = Field(True, description="Flush the epoch CSV after every epoch")

    @field_validator("profile")
    @classmethod
    def check_profile(cls, v: str) -> str:
        if v not in PROFILES:
            raise ValueError(f"Unknown profile {v!r}; expected one of {sorted(PROFILES)}")
        return v


def setup_logging(log_level: str = "INFO") -> None:
    """Set up logging configuration."""
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def get_settings() -> Settings:
    """Get application settings."""
    try:
        return Settings()
    except Exception as e:
        logging.error(f"Failed to load settings: {e}")
        raise


# Global settings instance
settings: Optional[Settings] = None


def get_app_settings() -> Settings:
    """Get the global settings instance."""
    global settings
    if settings is None:
        settings = get_settings()
    return settings


_DESK: Dict[str, Any] = {
    "n_t": 16, "n_c": 32, "n_s": 16, "cr": 16, "t_steps": 4, "input_scale": 25.0,
    "hidden_width": 1024, "progressive": True,
    "tau": 2.0, "v_th": 1.0, "v_reset": 0.0, "surrogate_width": 2.0,
    "learning_rate": 0.002, "epochs": 150, "batch_size": 200, "alpha": 0.5, "seed": 42,
    "augment": True, "augment_k": 16, "lambda_subset_batches": 4, "deterministic": True,
    "grad_clip": 10.0,
    "e_mac": 3.2e-12, "e_ac": 1e-13,
    "sample_count": 4000, "paths_min": 2, "paths_max": 8, "angle_jitter": 0.25,
}

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": _DESK,
    "paper": {
        **_DESK,
        "n_t": 32, "n_c": 1024, "n_s": 32, "cr": 8, "t_steps": 6,
        "hidden_width": 4096, "epochs": 1000, "sample_count": 10000,
    },
}

# section name -> (model class, keys)
SECTIONS: Dict[str, Tuple[Type[BaseModel], Tuple[str, ...]]] = {
    "system": (SystemConfig, tuple(SystemConfig.model_fields)),
    "lif": (LIFConfig, tuple(LIFConfig.model_fields)),
    "model": (ModelConfig, ("hidden_width", "progressive")),
    "train": (TrainConfig, tuple(TrainConfig.model_fields)),
    "energy": (EnergyModel, tuple(EnergyModel.model_fields)),
    "data": (DataConfig, tuple(DataConfig.model_fields)),
}

KNOWN_KEYS = frozenset(key for _, keys in SECTIONS.values() for key in keys) | {"profile"}


class RunConfig(BaseModel):
    """Every setting a command needs, validated together."""

    profile: str
    system: SystemConfig
    model: ModelConfig
    train: TrainConfig
    energy: EnergyModel
    data: DataConfig

    def to_key_values(self) -> str:
        flat: Dict[str, Any] = {"profile": self.profile}
        flat.update(self.system.model_dump())
        flat.update(self.model.model_dump(exclude={"lif"}))
        flat.update(self.model.lif.model_dump())
        flat.update(self.train.model_dump())
        flat.update(self.energy.model_dump())
        flat.update(self.data.model_dump())
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in flat.items())


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"Line {lineno}: empty key or value")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"Line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"Line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_run_config(
    values: Mapping[str, Any],
    profile: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Layer explicit values over a profile and validate every section."""
    name = profile or values.get("profile") or get_app_settings().profile
    if name not in PROFILES:
        raise ConfigError(f"Unknown profile {name!r}; expected one of {sorted(PROFILES)}")

    merged = dict(PROFILES[name])
    for key in sorted(KNOWN_KEYS - {"profile"}):
        if key in values:
            merged[key] = values[key]
        else:
            logger.info(f"key {key} not set; using profile default {merged[key]!r}")
    if seed is not None:
        merged["seed"] = seed

    try:
        sections = {
            section: cls(**{key: merged[key] for key in keys})
            for section, (cls, keys) in SECTIONS.items()
            if section not in ("model", "lif")
        }
        lif = LIFConfig(**{key: merged[key] for key in SECTIONS["lif"][1]})
        model = ModelConfig(hidden_width=merged["hidden_width"], progressive=merged["progressive"], lif=lif)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e

    return RunConfig(profile=name, model=model, **sections)


def load_run_config(
    path: Optional[Path] = None,
    profile: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Load a key=value file (optional) and resolve it against a profile.

    An explicit ``profile`` argument wins over the file's ``profile`` key.
    """
    values: Dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        values = parse_key_values(text)
    run = build_run_config(values, profile=profile, seed=seed)
    logger.info(f"Using profile {run.profile} with seed {run.train.seed}")
    return run
