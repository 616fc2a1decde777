import os
import logging
from dataclasses import dataclass

from dotenv import find_dotenv, load_dotenv

logger = logging.getLogger(__name__)

ENV_PREFIX = "HDG_AUDIT_"


@dataclass(frozen=True)
class Settings:
    cache_dir: str = ".cache"
    cache_duration: int = 24
    max_workers: int = 2
    log_level: str = "INFO"
    null_tol: float = 1e-10


def _read(name: str, default, cast):
    raw = os.getenv(ENV_PREFIX + name)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        logger.warning(f"Ignoring invalid {ENV_PREFIX}{name}={raw!r}, using {default!r}")
        return default


def load_settings() -> Settings:
    """
    Load settings from the environment, reading a .env file in or above the
    working directory first if one exists.

    Returns:
        Settings with defaults for anything unset or unparsable
    """
    load_dotenv(find_dotenv(usecwd=True))
    defaults = Settings()
    return Settings(
        cache_dir=_read("CACHE_DIR", defaults.cache_dir, str),
        cache_duration=_read("CACHE_DURATION", defaults.cache_duration, int),
        max_workers=max(1, _read("MAX_WORKERS", defaults.max_workers, int)),
        log_level=_read("LOG_LEVEL", defaults.log_level, str).upper(),
        null_tol=_read("NULL_TOL", defaults.null_tol, float),
    )
