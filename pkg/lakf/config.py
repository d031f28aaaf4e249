"""Configuration management using Pydantic models and pydantic-settings."""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from lakf.errors import DomainError
from lakf.evaluation import EvalConfig
from lakf.geometry import StateMode, as_mode
from lakf.learned_filters import NetworkConfig, Variant, as_variant
from lakf.logger import get_logger
from lakf.tracker import ByteConfig
from lakf.training import TrainConfig

logger = get_logger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "default.yaml"
EFFECTIVE_CONFIG_NAME = "effective_config.yaml"


class Settings(BaseSettings):
    """Environment-level settings, read from LAKF_* variables and .env."""

    log_level: str = Field(default="INFO", description="Logging level")
    log_dir: str = Field(default="logs", description="Directory of the JSON log file")
    num_threads: int = Field(default=1, ge=1, description="Worker threads for parallel generation and torch")
    run_dir: str = Field(default="runs", description="Default output directory")

    model_config = SettingsConfigDict(
        env_prefix="LAKF_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        allowed = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        v_upper = v.upper()
        if v_upper not in allowed:
            raise ValueError(f"log_level must be one of {allowed}")
        return v_upper


class DataConfig(BaseModel):
    """Where ground truth comes from and how measurements are simulated."""

    model_config = ConfigDict(extra="forbid")

    source: Literal["mot", "synthetic"] = Field(default="synthetic", description="Ground-truth source")
    mot_root: Optional[str] = Field(default=None, description="MOTChallenge split directory")
    dataset: str = Field(default="synthetic", description="Dataset name recorded on trajectories")
    categories: Optional[Dict[int, str]] = Field(default=None, description="MOT class id to category label")
    default_category: str = Field(default="Pedestrian", description="Category when no mapping is given")
    synthetic_tracks: int = Field(default=200, ge=1, description="Synthetic trajectories")
    synthetic_length: int = Field(default=100, ge=4, description="Frames per synthetic trajectory")
    alpha_p: float = Field(default=0.05, ge=0, description="Measurement noise factor")
    seed: int = Field(default=1, description="Simulation and split seed")
    val_fraction: float = Field(default=0.1, ge=0, lt=1, description="Share of train-pool trajectories for val")
    dataset_path: str = Field(default="data/dataset.jsonl", description="Dataset file")


class ModelConfig(BaseModel):
    """Filter family, state mode and architecture."""

    model_config = ConfigDict(extra="forbid")

    variant: Variant = Field(default=Variant.SIKNET, description="KF, KNET, SKNET or SIKNET")
    mode: StateMode = Field(default=StateMode.XYAH, description="State mode")
    alpha_p: float = Field(default=0.05, gt=0, description="KF position noise factor")
    alpha_v: float = Field(default=0.00625, gt=0, description="KF velocity noise factor")
    hidden_dim: int = Field(default=48, ge=1, description="Recurrent width")
    sie_channels: int = Field(default=4, ge=1, description="SIE convolution channels")
    normalize_inputs: bool = Field(default=False, description="Divide network inputs by the image size")
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint of a learned model")

    @field_validator("variant", mode="before")
    @classmethod
    def validate_variant(cls, v):
        return as_variant(v)

    @field_validator("mode", mode="before")
    @classmethod
    def validate_mode(cls, v):
        return as_mode(v)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(mode=self.mode, hidden_dim=self.hidden_dim, sie_channels=self.sie_channels,
                             normalize_inputs=self.normalize_inputs)


class EvalSection(EvalConfig):
    """Evaluation options plus the noise levels of the mismatch grid."""

    grid_alphas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4],
                                     description="Test noise levels of the mismatch grid")
    include_observation: bool = Field(default=True, description="Also score raw measurements")


class TrackSection(ByteConfig):
    """Tracker thresholds plus input/output locations."""

    detections: Optional[str] = Field(default=None, description="Detection file or directory; None uses GT")
    output_dir: str = Field(default="results", description="Directory of MOT result files")


class RunConfig(BaseModel):
    """Full configuration of one CLI run."""

    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    track: TrackSection = Field(default_factory=TrackSection)


def _set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise DomainError(f"cannot override {key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(item: str) -> tuple:
    """Splits ``a.b=value``; the value is parsed as a YAML scalar."""
    if "=" not in item:
        raise DomainError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise DomainError(f"override has an empty key: {item!r}")
    return key, yaml.safe_load(raw) if raw.strip() else None


def _unknown_key(exc: ValidationError) -> Optional[str]:
    for error in exc.errors():
        if error["type"] == "extra_forbidden":
            return ".".join(str(part) for part in error["loc"])
    return None


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Iterable[str] = ()) -> RunConfig:
    """
    Reads a YAML run configuration and applies dotted overrides.

    Args:
        path: YAML file; None starts from the built-in defaults
        overrides: Items such as ``train.epochs=5``

    Returns:
        Validated RunConfig

    Raises:
        DomainError: On an unknown key or invalid value
    """
    tree: Dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle) or {}
        if not isinstance(loaded, dict):
            raise DomainError(f"{path}: top level must be a mapping")
        tree = loaded
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        unknown = _unknown_key(exc)
        if unknown is not None:
            raise DomainError(f"unknown configuration key: {unknown}") from None
        raise DomainError(f"invalid configuration: {exc}") from None


def dump_run_config(cfg: RunConfig, run_dir: Union[str, Path]) -> Path:
    """Writes the effective configuration next to the run outputs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / EFFECTIVE_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(cfg.model_dump(mode="json"), handle, sort_keys=False)
    logger.debug(f"Effective config written to {path}")
    return path
