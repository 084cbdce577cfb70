import os
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide configuration."""

    model_config = SettingsConfigDict(env_prefix="PADDIT_", env_file=".env", case_sensitive=False)

    # Environment
    environment: str = os.getenv("PADDIT_ENVIRONMENT", "development")
    debug: bool = environment == "development"
    log_level: Optional[str] = None

    # Reproducibility and parallelism defaults for CLI runs
    default_seed: int = 0
    default_jobs: int = 1

    # Data locations
    data_dir: Optional[str] = os.getenv("PADDIT_DATA_DIR")
    output_dir: str = os.getenv("PADDIT_OUTPUT_DIR", "./paddit-out")


settings = Settings()
