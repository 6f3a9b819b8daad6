import hashlib
import json
import os
from collections.abc import Iterable
from pathlib import Path
from typing import Any

from aggronet.models import ConfigError

THREADS_ENV_VAR = "AGGRONET_THREADS"
DEFAULT_MAX_WORKERS = 4


def worker_count() -> int:
    """
    Number of worker threads for per-example augmentation.

    Reads ``AGGRONET_THREADS`` (which may come from a ``.env`` file loaded by the CLI) and
    otherwise uses up to four CPUs. The count never changes results.

    Returns:
        int: A positive thread count.

    Raises:
        ConfigError: If the environment variable is not a positive integer.
    """
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return max(1, min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1))
    try:
        count = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV_VAR}: must be a positive integer, got {raw!r}") from e
    if count < 1:
        raise ConfigError(f"{THREADS_ENV_VAR}: must be a positive integer, got {count}")
    return count


def blob_hash(data: bytes) -> str:
    """SHA-1 of ``data`` in git's blob framing (``git hash-object`` gives the same digest)."""
    header = f"blob {len(data)}\0".encode("ascii")
    return hashlib.sha1(header + data).hexdigest()


def content_hash(hashes: Iterable[str]) -> str:
    """One digest over an ordered list of blob hashes."""
    return hashlib.sha1("\n".join(hashes).encode("ascii")).hexdigest()


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2) + "\n"


def write_json(data: Any, path: str | Path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(to_json(data))
    except OSError as e:
        raise OSError(f"Could not write {path}: {e}") from e
    return path
