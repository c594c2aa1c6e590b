"""
Runtime settings from the environment.

Handles:
- Loading a local .env file
- Log level and log file for the CLI
- Default worker count of sweeps
"""

import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


@dataclass(frozen=True)
class RuntimeSettings:
    """Settings that belong to the machine rather than to a scenario."""

    log_level: str = "INFO"
    log_file: Optional[str] = None
    workers: int = 1

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        try:
            workers = int(os.getenv("MOESIM_WORKERS", "1"))
        except ValueError:
            workers = 1
        return cls(
            log_level=os.getenv("MOESIM_LOG_LEVEL", "INFO").upper(),
            log_file=os.getenv("MOESIM_LOG_FILE") or None,
            workers=max(1, workers),
        )
