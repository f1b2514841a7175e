"""
Configuration management for the partition kernel toolkit.
Loads environment variables (prefix RPK_) and an optional .env file.
"""

from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables."""

    # Paths
    base_dir: Path = Path(__file__).parent.parent.parent
    data_dir: Path = Field(default=base_dir / "data", description="Dataset root directory")
    output_dir: Path = Field(default=base_dir / "results")

    log_level: str = "INFO"

    # Experiment defaults
    default_m: int = Field(default=200, ge=1)
    scaling_m: int = Field(default=100, ge=1)
    jitter: float = Field(default=1e-2, gt=0.0)

    # Solver settings
    cg_tol: float = Field(default=1e-8, gt=0.0)
    cg_max_iter: int = Field(default=2000, ge=1)
    power_tol: float = Field(default=1e-8, gt=0.0)
    power_max_iter: int = Field(default=5000, ge=1)

    # Resource settings
    dense_cap: int = Field(default=10_000, ge=1)
    threads: int = Field(default=1, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="RPK_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# Singleton instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the settings singleton instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
        _settings.output_dir.mkdir(parents=True, exist_ok=True)
    return _settings


def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment."""
    global _settings
    _settings = None
