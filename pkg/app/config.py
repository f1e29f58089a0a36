"""Service configuration reader.

Reads settings from config.ini using configparser. Every key has a
default; DICKE_WORKERS overrides the default worker count.
"""

import configparser
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

logger = logging.getLogger(__name__)

CONFIG_FILE = Path(__file__).parent.parent / "config.ini"
WORKERS_ENV = "DICKE_WORKERS"


@dataclass(frozen=True)
class AppConfig:
    # [server]
    server_host: str = "0.0.0.0"
    server_port: int = 8015

    # [auth]
    api_key: str = "CHANGE_ME_TO_SECURE_KEY"

    # [runner]
    default_workers: int = 1
    output_root: str = "runs"
    max_upload_size_kb: int = 64

    # [logging]
    log_level: str = "INFO"


def _workers_from_env(fallback: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return fallback
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring %s=%r: not an integer", WORKERS_ENV, raw)
        return fallback
    if value < 1:
        logger.warning("Ignoring %s=%d: must be >= 1", WORKERS_ENV, value)
        return fallback
    return value


def _load_config(path: Path) -> AppConfig:
    """Parse config.ini and return AppConfig with defaults for missing values."""
    parser = configparser.ConfigParser()

    if path.exists():
        parser.read(path, encoding="utf-8")
        logger.info("Configuration loaded from %s", path)
    else:
        logger.warning("Config file not found at %s, using defaults", path)

    defaults = AppConfig()
    workers = parser.getint("runner", "default_workers", fallback=defaults.default_workers)

    return AppConfig(
        server_host=parser.get("server", "host", fallback=defaults.server_host),
        server_port=parser.getint("server", "port", fallback=defaults.server_port),
        api_key=parser.get("auth", "api_key", fallback=defaults.api_key),
        default_workers=_workers_from_env(workers),
        output_root=parser.get("runner", "output_root", fallback=defaults.output_root),
        max_upload_size_kb=parser.getint("runner", "max_upload_size_kb", fallback=defaults.max_upload_size_kb),
        log_level=parser.get("logging", "level", fallback=defaults.log_level).upper(),
    )


@lru_cache(maxsize=1)
def get_config() -> AppConfig:
    """Return cached service config (singleton)."""
    return _load_config(CONFIG_FILE)
