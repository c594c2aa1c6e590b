"""
Core modules for moesim.

This package contains the domain models, constants, and the simulation
engines.
"""

from moesim.core.constants import (
    EngineMode,
    RequestState,
    EventKind,
    LoadOp,
    ScheduleReason,
    PredictionVariant,
    ETaskType,
    DEFAULT_INVOCATION_PERIOD,
    DEFAULT_SMOOTHING,
    MODEL_PRESETS,
)

__all__ = [
    "EngineMode",
    "RequestState",
    "EventKind",
    "LoadOp",
    "ScheduleReason",
    "PredictionVariant",
    "ETaskType",
    "DEFAULT_INVOCATION_PERIOD",
    "DEFAULT_SMOOTHING",
    "MODEL_PRESETS",
]

__version__ = "1.0.0"
