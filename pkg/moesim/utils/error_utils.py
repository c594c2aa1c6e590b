"""
Error handling utilities for moesim.

This module provides centralized error handling and logging for the simulator.
It includes the exception hierarchy used across the codebase and a decorator
for consistent error reporting around file-facing and orchestration code.

Classes:
    MoeSimError: Base exception carrying a message, details and a timestamp
    ScenarioValidationError: Malformed inputs (config, shapes, probabilities)
    RoutingError: A layer has no device-resident expert to route to
    InvalidTransitionError: Illegal request lifecycle transition
    SimulationError: Unexpected failure wrapped by ``error_handler``
"""

import os
import sys
import logging
import traceback
from datetime import datetime
from functools import wraps
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    (Re)configure root logging.

    Console output always goes to stdout; a file handler is added only when a
    log file is configured (``MOESIM_LOG_FILE``), so sweeps running in
    parallel workers never race on a default log file.

    Args:
        level: Logging level name, defaults to ``MOESIM_LOG_LEVEL`` or INFO
        log_file: Optional log file path, defaults to ``MOESIM_LOG_FILE``
    """
    level = (level or os.getenv("MOESIM_LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("MOESIM_LOG_FILE")

    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


configure_logging()

logger = logging.getLogger(__name__)


class MoeSimError(Exception):
    """Base exception class for moesim errors"""

    def __init__(self, message, details=None):
        self.message = message
        self.details = details
        self.timestamp = datetime.now()
        super().__init__(self.message)


class ScenarioValidationError(MoeSimError):
    """Invalid scenario, shape, probability vector or argument"""


class RoutingError(MoeSimError):
    """No resident expert available at a layer"""


class InvalidTransitionError(MoeSimError):
    """Request state moved outside waiting -> scheduled -> running -> completed"""


class SimulationError(MoeSimError):
    """Unexpected failure inside a simulation or sweep point"""


def error_handler(func):
    """
    Decorator for handling errors and providing detailed information.

    moesim's own exceptions pass through untouched so callers can still map
    them to exit codes; anything else is logged and re-raised as
    ``SimulationError`` with a details dict.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except MoeSimError:
            raise
        except Exception as e:
            exc_type, exc_value, exc_tb = sys.exc_info()
            tb = traceback.extract_tb(exc_tb)

            error_location = f"{tb[-1].filename}:{tb[-1].lineno}"
            error_function = tb[-1].name

            error_details = {
                "error_type": exc_type.__name__,
                "location": error_location,
                "function": error_function,
                "arguments": {"args": str(args)[:500], "kwargs": str(kwargs)[:500]},
                "traceback": traceback.format_exc(),
            }

            logger.error(f"Error in {error_location} - {error_function}: {str(e)}")
            logger.debug(f"Detailed error information: {error_details}")

            raise SimulationError(
                f"Error in {error_function} at {error_location}: {str(e)}",
                error_details,
            ) from e

    return wrapper


# Module metadata
__version__ = "1.0.0"
__author__ = "moesim Development Team"
__description__ = "Error handling utilities for moesim"
