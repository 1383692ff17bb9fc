from pathlib import Path

from loguru import logger
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):

    model_config: SettingsConfigDict = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", env_prefix="NODEGAM_",
    )

    # Logging Configuration
    LOG_LEVEL: str = Field(
        default="INFO",
        description="Minimum level for the stderr log sink."
    )

    # Output Configuration
    OUTPUT_DIR: str = Field(
        default="runs",
        description="Default directory for model containers, histories and explanations."
    )

    # Runtime Configuration
    THREADS: int = Field(
        default=0,
        description="Intra-op thread count for torch; 0 keeps the torch default."
    )

    DETERMINISTIC: bool = Field(
        default=True,
        description="Force deterministic algorithms and a single thread."
    )

    # Preset Configuration
    PRESETS_DIR: str = Field(
        default=str(Path(__file__).parent / "presets"),
        description="Directory holding hyperparameter preset YAML files."
    )


    @field_validator("LOG_LEVEL")
    @classmethod
    def check_level(cls, value: str, info) -> str:
        value = value.upper()
        if value not in {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"}:
            logger.error(f"{info.field_name} is not a loguru level: {value}")
            raise ValueError(f"{info.field_name} must be a loguru level.")

        return value

    @field_validator("THREADS")
    @classmethod
    def check_threads(cls, value: int, info) -> int:
        if value < 0:
            raise ValueError(f"{info.field_name} cannot be negative.")
        return value


try:
    settings = Settings()

except Exception as e:
    logger.error(f"Failed to load configuration: {e}")
    raise SystemExit(e)
