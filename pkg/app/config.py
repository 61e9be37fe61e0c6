"""
EEG-ConvTransformer - Configuration
Uses pydantic-settings for type-safe config from environment variables (prefix CT_)
"""
from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables"""

    # --- Reproducibility ---
    seed: int = 0  # CT_SEED is the fallback for every --seed flag

    # --- Outputs ---
    out_dir: Path = Path("runs")

    # --- Numerics ---
    precision: Literal["32", "64"] = "32"
    grid_size: int = 34  # G1 = G2 before border crop
    cka_subsample_cap: int = 4096

    # --- Execution ---
    jobs: int = 1

    # --- App Config ---
    environment: str = "development"
    debug: bool = False
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="CT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.
    Uses lru_cache to avoid reading .env file multiple times.
    """
    return Settings()


# Quick access
settings = get_settings()
