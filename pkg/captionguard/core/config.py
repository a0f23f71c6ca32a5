from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import List, Optional
from functools import lru_cache
from pathlib import Path
import json

from captionguard.core.errors import ConfigError
from captionguard.schemas.model import ClassifierConfig


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", case_sensitive=True)

    # Application
    APP_NAME: str = "captionguard"

    # Models
    DEFAULT_MODEL: str = "logistic"
    CONFIDENCE_THRESHOLD: float = 0.5

    # Evaluation
    ECE_BINS: int = 10
    N_SPLITS: int = 10
    TRAIN_FRACTION: float = 0.8
    RECALL_TARGETS: List[float] = [0.7, 0.8, 0.9, 1.0]
    N_JOBS: int = 1

    # Labeling
    DEFAULT_SYNONYMS: str = "bdd100k"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    traces: Optional[Path] = None
    synonyms: Optional[str] = None
    labels: Optional[Path] = None
    dataset: Optional[List[Path]] = None
    model: Optional[Path] = None
    validation: Optional[Path] = None
    detections: Optional[Path] = None
    synth: Optional[Path] = None
    out: Optional[Path] = None


class FeatureFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    extended: bool = False
    decoding: Optional[str] = Field(None, pattern="^(sampling|beam)$")


class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_splits: int = Field(default_factory=lambda: get_settings().N_SPLITS, ge=1)
    train_fraction: float = Field(default_factory=lambda: get_settings().TRAIN_FRACTION, gt=0.0, lt=1.0)
    n_jobs: int = Field(default_factory=lambda: get_settings().N_JOBS)


class PipelineConfig(BaseModel):
    """Everything one CLI invocation needs; loaded from --config and overridden by flags"""

    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = None
    paths: PathsConfig = Field(default_factory=PathsConfig)
    features: FeatureFlags = Field(default_factory=FeatureFlags)
    classifier: ClassifierConfig = Field(
        default_factory=lambda: ClassifierConfig(
            kind=get_settings().DEFAULT_MODEL, threshold=get_settings().CONFIDENCE_THRESHOLD
        )
    )
    split: SplitConfig = Field(default_factory=SplitConfig)
    recall_targets: List[float] = Field(default_factory=lambda: list(get_settings().RECALL_TARGETS))
    ece_bins: int = Field(default_factory=lambda: get_settings().ECE_BINS, ge=1)

    @classmethod
    def from_file(cls, path: Optional[Path]) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as handle:
                return cls.model_validate(json.load(handle))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required for this command (--seed or 'seed' in the config)")
        return self.seed

    def require_path(self, name: str, must_exist: bool = True) -> Path:
        value = getattr(self.paths, name)
        if value is None:
            raise ConfigError(f"missing path '{name}' (flag or 'paths.{name}' in the config)")
        if isinstance(value, list):
            raise ConfigError(f"path '{name}' holds several files; expected one")
        path = Path(value)
        if must_exist and not path.exists():
            raise ConfigError(f"path '{name}' does not exist: {path}")
        return path
