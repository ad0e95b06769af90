"""Configuration management: environment settings and run configuration files"""
import hashlib
import json
from pathlib import Path
from typing import Optional, Union
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from backend.app.exceptions import ConfigError
from backend.app.models import RunConfig


class Settings(BaseSettings):
    """Application settings loaded from environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="SNOWDENSITY_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Output
    out_dir: str = Field(default="./outputs")

    # Parallelism inside likelihood evaluations; never changes results
    threads: int = Field(default=1, ge=1)

    # API Configuration
    api_host: str = Field(default="0.0.0.0")
    api_port: int = Field(default=8000)

    # Logging
    log_level: str = Field(default="INFO")

    @property
    def out_path(self) -> Path:
        """Return the output directory as a Path"""
        return Path(self.out_dir)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load and validate a run configuration
    Args:
        path: JSON file; None returns the defaults
    Returns:
        Validated RunConfig
    """
    if path is None:
        return RunConfig()

    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}", path=str(config_path))

    try:
        return RunConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"Invalid run config {config_path}: {e}", path=str(config_path)) from e


def config_hash(config: RunConfig) -> str:
    """SHA256 of the canonical JSON form of a run config"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Global settings instance
settings = Settings()
