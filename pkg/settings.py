from __future__ import annotations

import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from loguru import logger

from errors import DomainError

__version__ = "0.1.0"

WORKERS_ENV = "CCMFBM_WORKERS"
CONFIG_ENV = "CCMFBM_CONFIG"

CANDIDATE_CONFIG_PATHS = (
    Path("ccmfbm.toml"),
    Path.home() / ".config" / "ccmfbm" / "config.toml",
)


def worker_count() -> int:
    default = os.cpu_count() or 1
    raw = os.getenv(WORKERS_ENV, "").strip()
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("{}={!r} is not an integer; using {} workers", WORKERS_ENV, raw, default)
        return default
    if value < 1:
        logger.warning("{}={} must be positive; using {} workers", WORKERS_ENV, value, default)
        return default
    return value


def resolve_config_path(explicit: str | os.PathLike[str] | None = None) -> Path | None:
    # Priority: explicit flag, env var, then the usual file locations.
    if explicit:
        path = Path(explicit)
        if not path.exists():
            raise DomainError(f"config file not found: {path}")
        return path

    from_env = os.getenv(CONFIG_ENV, "").strip()
    if from_env:
        path = Path(from_env)
        if path.exists():
            return path
        logger.warning("{} points to a missing file ({}); ignoring it", CONFIG_ENV, path)

    for candidate in CANDIDATE_CONFIG_PATHS:
        if candidate.exists():
            return candidate
    return None


def load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = path.read_text(encoding="utf-8")
        parsed = tomllib.loads(raw.lstrip("\ufeff"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise DomainError(f"cannot read config file {path}: {exc}") from exc
    logger.debug("loaded config from {}", path)
    return parsed


def command_defaults(config: dict[str, Any], commands: list[str]) -> dict[str, dict[str, Any]]:
    """Turn a parsed config file into a click ``default_map``.

    Top-level scalar keys apply to every subcommand; a table named after a
    subcommand overrides them for that subcommand only. Keys may use dashes or
    underscores.
    """
    shared = {_option_key(k): v for k, v in config.items() if not isinstance(v, dict)}
    default_map: dict[str, dict[str, Any]] = {}
    for name in commands:
        section = config.get(name, {})
        if not isinstance(section, dict):
            raise DomainError(f"config entry [{name}] must be a table")
        merged = dict(shared)
        merged.update({_option_key(k): v for k, v in section.items()})
        if merged:
            default_map[name] = merged
    return default_map


def _option_key(key: str) -> str:
    return key.strip().replace("-", "_")
