"""
Test suite for constants in moesim.
"""

import pytest

from moesim.core.constants import (
    DEFAULT_INVOCATION_PERIOD,
    GEN_RESET_FRACTION,
    MODEL_PRESETS,
    EngineMode,
    EventKind,
    PredictionVariant,
    RequestState,
    ScheduleReason,
)


def test_engine_mode_values():
    """Test EngineMode enum values."""
    assert EngineMode.values() == ["baseline", "dynamic", "prefetch", "random", "emoe_a", "emoe_l", "emoe_e"]
    assert EngineMode("emoe_a") is EngineMode.EMOE_A


def test_engine_mode_properties():
    """Test which modes predict, re-plan and load on demand."""
    predicting = {m for m in EngineMode if m.uses_prediction}
    assert predicting == {EngineMode.EMOE_A, EngineMode.EMOE_L, EngineMode.EMOE_E}

    replanning = {m for m in EngineMode if m.replans_periodically}
    assert replanning == predicting | {EngineMode.RANDOM}

    on_demand = {m for m in EngineMode if m.loads_on_demand}
    assert on_demand == {EngineMode.DYNAMIC, EngineMode.PREFETCH}


def test_request_state_transitions():
    """Only the next state in declaration order is reachable."""
    assert RequestState.WAITING.can_transition_to(RequestState.SCHEDULED)
    assert RequestState.SCHEDULED.can_transition_to(RequestState.RUNNING)
    assert RequestState.RUNNING.can_transition_to(RequestState.COMPLETED)

    assert not RequestState.WAITING.can_transition_to(RequestState.RUNNING)
    assert not RequestState.RUNNING.can_transition_to(RequestState.WAITING)
    assert not RequestState.COMPLETED.can_transition_to(RequestState.WAITING)


def test_event_kind_tie_order():
    """Load completions run before iterations, then arrivals, then predictor calls."""
    assert sorted(EventKind) == [
        EventKind.LOAD_COMPLETE,
        EventKind.ITERATION,
        EventKind.ARRIVAL,
        EventKind.PREDICTOR,
    ]


def test_enum_string_values():
    """Test values written to event logs."""
    assert ScheduleReason.IDLE_OVERRIDE.value == "idle_override"
    assert ScheduleReason.OVER_BUDGET.value == "over_budget"
    assert PredictionVariant.LAYERWISE.value == "layerwise"


def test_defaults():
    """Test default predictor and bookkeeping constants."""
    assert DEFAULT_INVOCATION_PERIOD == 40
    assert GEN_RESET_FRACTION == 0.05


@pytest.mark.parametrize(
    "preset,seconds",
    [("openmoe", 4.431), ("mixtral", 12.744)],
)
def test_model_presets(preset, seconds):
    """Test measured transfer totals and predictor overheads."""
    assert MODEL_PRESETS[preset]["full_transfer_seconds"] == seconds
    costs = MODEL_PRESETS[preset]["predictor_cost"]
    assert costs["emoe_l"] > costs["emoe_a"] > 0
