import os
import logging

ENV_PREFIX = "FORCESIM_"


def _env(name: str) -> str | None:
    return os.getenv(f"{ENV_PREFIX}{name}")


def _to_bool(s: str | None, default=True) -> bool:
    if s is None:
        return default
    return s.strip().lower() not in {"0", "false", "no", "off"}


def _to_int(s: str | None, default: int | None = None) -> int | None:
    try:
        return int(s) if s is not None else default
    except ValueError:
        return default


def _to_float(s: str | None, default: float | None = None) -> float | None:
    try:
        return float(s) if s is not None else default
    except ValueError:
        return default


def env_bool(name: str, default: bool) -> bool:
    return _to_bool(_env(name), default=default)


def env_int(name: str, default: int) -> int:
    return _to_int(_env(name), default=default)


def env_float(name: str, default: float) -> float:
    return _to_float(_env(name), default=default)


def configure_logging(level: str | None = None) -> None:
    """Install one stream handler; level from FORCESIM_LOG_LEVEL unless given."""
    level = (level or _env("LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )
