import logging
import os

from dotenv import load_dotenv
from pydantic import BaseModel, Field


class Settings(BaseModel):
    threads: int = Field(default=4, ge=1, description="Cap on concurrent BO evaluations")
    log_level: str = "INFO"


def load_settings() -> Settings:
    """
    Read runtime settings from the environment.

    A ``.env`` file in the working directory is loaded first; variables already
    present in the environment take precedence.

    Returns:
        Settings with ``TEMPEST_THREADS`` and ``TEMPEST_LOG_LEVEL`` applied
    """
    load_dotenv(override=False)
    threads = os.getenv("TEMPEST_THREADS", "4")
    try:
        threads_value = max(1, int(threads))
    except ValueError:
        threads_value = 4
    return Settings(threads=threads_value, log_level=os.getenv("TEMPEST_LOG_LEVEL", "INFO").upper())


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
