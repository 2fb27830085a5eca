"""
Environment and run configuration.

Environment variables (a .env in the working directory is honoured):
    MGCN_THREADS    worker threads for PNG decoding (default: CPU count)
    MGCN_DB_PATH    run registry location (default ~/.mgcn/runs.db)
    MGCN_LOG_LEVEL  default log level (default INFO)

Run options resolve as: command-line flags > --config file > defaults.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from dotenv import find_dotenv, load_dotenv

from .errors import UsageError

logger = logging.getLogger(__name__)

DEFAULT_DB_PATH = Path.home() / ".mgcn" / "runs.db"


def load_env() -> None:
    """Load .env from the working directory without overriding the real environment."""
    load_dotenv(find_dotenv(usecwd=True))


def get_threads() -> int:
    raw = os.getenv("MGCN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"[Config] Ignoring non-integer MGCN_THREADS={raw!r}")
    return max(1, os.cpu_count() or 1)


def get_db_path() -> Path:
    return Path(os.getenv("MGCN_DB_PATH", str(DEFAULT_DB_PATH))).expanduser()


def get_log_level(verbose: bool = False) -> int:
    if verbose:
        return logging.DEBUG
    name = os.getenv("MGCN_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def read_config_file(path: str, allowed: Iterable[str]) -> Dict[str, str]:
    """
    Parse `key = value` lines. Blank lines and `#` comments are skipped;
    keys may use `-` or `_`. Unknown keys are a usage error.
    """
    allowed = set(allowed)
    values: Dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def merge_options(
    flags: Mapping[str, Any],
    file_values: Mapping[str, Any],
    defaults: Mapping[str, Any],
) -> Dict[str, Any]:
    """Flags that were given (not None) win, then the config file, then defaults."""
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def coerce(value: Any, kind: type, key: str) -> Optional[Any]:
    if value is None or isinstance(value, kind):
        return value
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid value for {key}: {value!r}") from e
