import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from core.logger import MainLogger

THREADS_ENV = "CACEMIX_THREADS"
LIBRARY_VERSION = "0.1.0"


class RunManifest(BaseModel):
    """
    Provenance of one command-line run; every result file points back to it.

    Attributes:
        command (str): Sub-command that produced the results (`fit` or `simulate`).
        config (Dict[str, Any]): Snapshot of the validated arguments.
        seeds (Dict[str, int]): Root seeds used by the run.
        library_version (str): Version of the package.
        wall_time_seconds (float): Elapsed time; excluded from the determinism contract.
        warnings (List[str]): Conventions applied and data issues met during the run.
    """

    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int] = Field(default_factory=dict)
    library_version: str = LIBRARY_VERSION
    wall_time_seconds: float = 0.0
    warnings: List[str] = Field(default_factory=list)

    @property
    def run_id(self) -> str:
        """Stable hash of command, config and seeds (wall time excluded)."""
        payload = json.dumps({"command": self.command, "config": self.config, "seeds": self.seeds}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def setup_output_dir(out: Path, logger: MainLogger) -> Path:
    """
    Ensure the output directory exists.

    Args:
        out (Path): Directory receiving the result files.
        logger (MainLogger): Logger instance to record debug information.

    Returns:
        Path: The same directory, created if needed.
    """
    if not out.exists():
        logger.debug(f"Creating output directory {out}.")
        out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, payload: Any) -> None:
    """Write `payload` as indented, key-sorted JSON so equal payloads give equal bytes."""
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def child_seed(*keys: int) -> int:
    """
    Deterministic 32-bit seed derived from a tuple of integer keys.

    Example:
        >>> child_seed(12, 3) == child_seed(12, 3)
        True
    """
    return int(np.random.SeedSequence([int(key) for key in keys]).generate_state(1)[0])


def resolve_threads(threads: Optional[int]) -> int:
    """
    Worker-thread count: the explicit value, else `CACEMIX_THREADS`, else 1.

    Raises:
        ValueError: If the environment variable is not a positive integer.
    """
    if threads is not None:
        return threads
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    if not value.isdigit() or int(value) < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got '{value}'.")
    return int(value)
