"""
Cost and engine configuration models for moesim.

Classes:
    CostModel: Compute, transfer and predictor costs of the simulated server
    EngineConfig: Placement policy and scheduler settings of one run
"""

from dataclasses import dataclass, asdict, replace
from typing import Any, Dict, Optional, Sequence, Tuple

from moesim.core.constants import (
    DEFAULT_INVOCATION_PERIOD,
    DEFAULT_PREDICTION_BLEND,
    EngineMode,
)
from moesim.core.models.model_shape import ModelShape
from moesim.utils.error_utils import ScenarioValidationError


@dataclass(frozen=True)
class CostModel:
    """
    Timing model of the simulated server.

    Attributes:
        per_token_cost: Seconds of compute per processed token (c)
        per_expert_transfer: Seconds to move one expert host -> device
        hd_bandwidth: Effective host-to-device bytes per second
        predictor_invocation_cost: Seconds per predictor call
        contention_factor: Compute slowdown while a transfer or the predictor
            overlaps an iteration (>= 1)
        predictor_layer_cost: Extra seconds per chained layer prediction
            (layer-by-layer predictors only)
    """

    per_token_cost: float
    per_expert_transfer: float
    hd_bandwidth: float
    predictor_invocation_cost: float = 0.0
    contention_factor: float = 1.0
    predictor_layer_cost: float = 0.0

    def __post_init__(self):
        if self.per_token_cost <= 0:
            raise ScenarioValidationError(f"per_token_cost must be positive, got {self.per_token_cost}")
        if self.per_expert_transfer <= 0:
            raise ScenarioValidationError(f"per_expert_transfer must be positive, got {self.per_expert_transfer}")
        if self.hd_bandwidth <= 0:
            raise ScenarioValidationError(f"hd_bandwidth must be positive, got {self.hd_bandwidth}")
        if self.predictor_invocation_cost < 0 or self.predictor_layer_cost < 0:
            raise ScenarioValidationError("predictor costs must be non-negative")
        if self.contention_factor < 1:
            raise ScenarioValidationError(f"contention_factor must be >= 1, got {self.contention_factor}")

    @classmethod
    def from_bandwidth(
        cls,
        shape: ModelShape,
        per_token_cost: float,
        hd_bandwidth: float,
        transfer_setup: float = 0.0,
        bandwidth_degradation: float = 1.0,
        **kwargs,
    ) -> "CostModel":
        """
        Derive the per-expert transfer time from bandwidth.

        ``bandwidth_degradation`` (>= 1) divides the nominal bandwidth, standing
        in for PCIe contention with concurrent transfers.
        """
        if bandwidth_degradation < 1:
            raise ScenarioValidationError(f"bandwidth_degradation must be >= 1, got {bandwidth_degradation}")
        if transfer_setup < 0:
            raise ScenarioValidationError(f"transfer_setup must be non-negative, got {transfer_setup}")
        if hd_bandwidth <= 0:
            raise ScenarioValidationError(f"hd_bandwidth must be positive, got {hd_bandwidth}")
        effective = hd_bandwidth / bandwidth_degradation
        return cls(
            per_token_cost=per_token_cost,
            per_expert_transfer=transfer_setup + shape.expert_bytes / effective,
            hd_bandwidth=effective,
            **kwargs,
        )

    @classmethod
    def calibrated(cls, shape: ModelShape, per_token_cost: float, full_transfer_seconds: float, **kwargs) -> "CostModel":
        """Match a measured time to move every expert of the model to the device."""
        if full_transfer_seconds <= 0:
            raise ScenarioValidationError(f"full_transfer_seconds must be positive, got {full_transfer_seconds}")
        return cls(
            per_token_cost=per_token_cost,
            per_expert_transfer=full_transfer_seconds / shape.total_experts,
            hd_bandwidth=shape.full_expert_bytes / full_transfer_seconds,
            **kwargs,
        )

    def full_transfer_seconds(self, shape: ModelShape) -> float:
        return shape.total_experts * self.per_expert_transfer

    def predictor_cost(self, mode: EngineMode, num_layers: int) -> float:
        """Busy time of one predictor call; chained predictions pay per extra layer."""
        mode = EngineMode(mode)
        if not mode.uses_prediction:
            return 0.0
        if mode is EngineMode.EMOE_L:
            return self.predictor_invocation_cost + self.predictor_layer_cost * max(0, num_layers - 1)
        return self.predictor_invocation_cost

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EngineConfig:
    """
    Settings of one simulation run.

    Attributes:
        mode: Placement policy
        budgets: Per-layer budget L (ignored by baseline)
        token_budget: Scheduler token budget (T_max)
        invocation_period: Prompts between predictor calls (p)
        seed: Seed of the engine's own random stream (random placements)
        task_aware: Zero out insensitive layers when ranking experts
        prediction_blend: Weight of the prediction against the task's
            profiled frequencies in the expected token counts
    """

    mode: EngineMode
    budgets: Tuple[int, ...]
    token_budget: int
    invocation_period: int = DEFAULT_INVOCATION_PERIOD
    seed: int = 0
    task_aware: bool = True
    prediction_blend: float = DEFAULT_PREDICTION_BLEND

    def __post_init__(self):
        object.__setattr__(self, "mode", EngineMode(self.mode))
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        if self.invocation_period < 1:
            raise ScenarioValidationError(f"invocation_period must be >= 1, got {self.invocation_period}")
        if self.token_budget < 1:
            raise ScenarioValidationError(f"token_budget must be >= 1, got {self.token_budget}")
        if not 0.0 <= self.prediction_blend <= 1.0:
            raise ScenarioValidationError(f"prediction_blend must be in [0, 1], got {self.prediction_blend}")

    def validate(self, shape: ModelShape) -> None:
        if self.mode is EngineMode.BASELINE:
            return
        if len(self.budgets) != shape.num_moe_layers:
            raise ScenarioValidationError(
                f"budgets must have {shape.num_moe_layers} entries, got {len(self.budgets)}"
            )
        for layer, budget in enumerate(self.budgets):
            if not 1 <= budget <= shape.experts_per_layer:
                raise ScenarioValidationError(
                    f"budgets[{layer}]={budget} outside [1, {shape.experts_per_layer}]"
                )

    def with_overrides(self, **changes) -> "EngineConfig":
        return replace(self, **changes)


def budgets_from_fraction(
    shape: ModelShape, fraction: float, overrides: Optional[Sequence[Optional[int]]] = None
) -> Tuple[int, ...]:
    """
    Per-layer budgets from a single fraction of E.

    L = round(fraction * E), at least 1; ``overrides`` replaces individual
    layers where an entry is not None.

    Examples:
        >>> budgets_from_fraction(ModelShape(2, 10, 2, 1), 0.6)
        (6, 6)
    """
    if not 0.0 < fraction <= 1.0:
        raise ScenarioValidationError(f"budget fraction must be in (0, 1], got {fraction}")
    budget = max(1, int(round(fraction * shape.experts_per_layer)))
    budgets = [budget] * shape.num_moe_layers
    if overrides is not None:
        if len(overrides) != shape.num_moe_layers:
            raise ScenarioValidationError(f"layer budget overrides need {shape.num_moe_layers} entries")
        for layer, value in enumerate(overrides):
            if value is not None:
                budgets[layer] = int(value)
    return tuple(budgets)
