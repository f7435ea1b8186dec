"""Configuration management for amopt"""
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings, read from the environment and an optional .env file"""

    PROJECT_NAME: str = "amopt"
    VERSION: str = "1.0.0"

    # Run control
    SEED: Optional[int] = None
    RUNS_DIR: str = "./runs"
    RECORD_WALL_CLOCK: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "console"

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        if isinstance(v, str):
            return v.strip().upper()
        return v

    @field_validator("LOG_FORMAT")
    @classmethod
    def check_log_format(cls, v):
        if v not in ("console", "json"):
            raise ValueError("LOG_FORMAT must be 'console' or 'json'")
        return v

    class Config:
        env_prefix = "AMOPT_"
        env_file = ".env"
        extra = "ignore"


settings = Settings()
