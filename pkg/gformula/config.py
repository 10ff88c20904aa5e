from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Execution
    workers: int = Field(1, ge=1)
    chunk_size: int = Field(4096, ge=1)  # trajectories per random stream block
    output_dir: str = "output"

    # Logging
    log_level: str = "INFO"
    log_file: Optional[str] = None
    debug: bool = False

    # Guards and recommendations
    min_recommended_nsimul: int = 10_000
    max_enumeration_paths: int = 1_000_000

    model_config = SettingsConfigDict(
        env_prefix="GFORMULA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()
