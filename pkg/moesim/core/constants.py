"""
Core constants and enumerations for moesim.

This module defines all constant values, enumerations, and default
parameters used throughout the serving simulator.
"""

from enum import Enum, IntEnum
from typing import List

# Scenario file format
SCHEMA_VERSION = 1

# Predictor defaults
DEFAULT_INVOCATION_PERIOD = 40  # prompts between predictor calls
DEFAULT_SMOOTHING = 0.01  # additive pseudo-count
SCORE_DECIMALS = 6  # scores closer than this rank as ties

# Task-aware loading
DEFAULT_SENSITIVITY_THRESHOLD = 0.85
DEFAULT_PREDICTION_BLEND = 0.5

# Generation-length bookkeeping
GEN_RESET_FRACTION = 0.05
MAX_OUTPUT_TOKENS = 1000
MAX_INPUT_TOKENS = 8192

# Routing trace generation
DEFAULT_TOKEN_DISPERSION = 0.1
DEFAULT_SAMPLE_PROMPTS = 200  # prompts per calibration sample trace
DEFAULT_SAMPLE_TOKENS = 64
CALIBRATION_TOLERANCE = 0.05  # measured vs target correlation
PROBABILITY_TOLERANCE = 1e-9


class EngineMode(str, Enum):
    """
    Expert placement policies the engine can simulate.

    BASELINE keeps every expert resident. DYNAMIC and PREFETCH transfer the
    experts each iteration needs on demand (PREFETCH overlaps the next layer's
    transfer with the current layer's compute). RANDOM and the EMOE_* modes
    re-plan the placement on predictor invocations.
    """
    BASELINE = "baseline"
    DYNAMIC = "dynamic"
    PREFETCH = "prefetch"
    RANDOM = "random"
    EMOE_A = "emoe_a"
    EMOE_L = "emoe_l"
    EMOE_E = "emoe_e"

    @property
    def uses_prediction(self) -> bool:
        return self in (EngineMode.EMOE_A, EngineMode.EMOE_L, EngineMode.EMOE_E)

    @property
    def replans_periodically(self) -> bool:
        """Modes whose placement changes only at invocation points."""
        return self.uses_prediction or self is EngineMode.RANDOM

    @property
    def loads_on_demand(self) -> bool:
        return self in (EngineMode.DYNAMIC, EngineMode.PREFETCH)

    @classmethod
    def values(cls) -> List[str]:
        return [mode.value for mode in cls]


class RequestState(str, Enum):
    """Request lifecycle; the only legal order is the declaration order."""
    WAITING = "waiting"
    SCHEDULED = "scheduled"
    RUNNING = "running"
    COMPLETED = "completed"

    def can_transition_to(self, other: "RequestState") -> bool:
        order = list(RequestState)
        return order.index(other) == order.index(self) + 1


class EventKind(IntEnum):
    """Event kinds; the integer value is the tie order at equal timestamps."""
    LOAD_COMPLETE = 0
    ITERATION = 1
    ARRIVAL = 2
    PREDICTOR = 3


class LoadOp(str, Enum):
    """Single transfer operation inside a loading plan"""
    EVICT = "evict"
    LOAD = "load"


class ScheduleReason(str, Enum):
    """Reason codes attached to scheduling decisions"""
    ADMITTED = "admitted"
    OVER_BUDGET = "over_budget"
    OWN_SLO = "own_slo"
    PEER_SLO = "peer_slo"
    IDLE_OVERRIDE = "idle_override"
    DROPPED = "dropped"


class PredictionVariant(str, Enum):
    """How a predictor forecasts the next prompt's experts"""
    ALL_LAYERS = "all_layers"  # every layer from the previous prompt at once
    LAYERWISE = "layerwise"  # chained layer by layer


class ETaskType:
    """Task identifiers of the built-in task profiles"""
    CLASSIFICATION = "clsfy"
    COMPARISON = "comp"
    QUESTION_ANSWERING = "qa"
    SUMMARIZATION = "sum"
    CONVERSATION = "conv"


DEFAULT_TASK_ID = ETaskType.CONVERSATION


# Measured full-model host-to-device transfer totals and per-invocation
# predictor overheads (seconds) of the two reference models.
MODEL_PRESETS = {
    "openmoe": {
        "full_transfer_seconds": 4.431,
        "predictor_cost": {"emoe_a": 0.381, "emoe_l": 1.387},
    },
    "mixtral": {
        "full_transfer_seconds": 12.744,
        "predictor_cost": {"emoe_a": 0.334, "emoe_l": 4.211},
    },
}


# Module metadata
__version__ = "1.0.0"
__author__ = "moesim Development Team"
__description__ = "Core constants and enumerations for moesim"
