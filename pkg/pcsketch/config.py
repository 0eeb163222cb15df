import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

ENV_PREFIX = "PCS_"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class Settings(BaseModel):
    seed: int = Field(default=20220127, ge=0, lt=2**64)
    trials: int = Field(default=100_000, ge=1)
    workers: int = Field(default=1, ge=1)
    out_dir: str = "results"
    log_level: str = "INFO"
    max_table_entries: int = Field(default=2**30, ge=1)
    resample_limit: int = Field(default=16, ge=0)
    sketch_dir: str = "sketches"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Settings from a .env file and PCS_* environment variables (env wins)."""
    load_dotenv()
    values = {}
    for name in Settings.model_fields:
        raw = os.getenv(f"{ENV_PREFIX}{name.upper()}")
        if raw is not None and raw.strip():
            values[name] = raw.strip()
    settings = Settings(**values)
    logger.debug(f"Loaded settings: {settings.model_dump()}")
    return settings


def configure_logging(level: str = None):
    logging.basicConfig(
        level=(level or get_settings().log_level).upper(),
        format=LOG_FORMAT
    )
