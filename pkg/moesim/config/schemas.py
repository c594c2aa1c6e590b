"""
Pydantic schemas for scenario files.

A scenario file is a JSON document with ``schema_version`` 1 describing the
model, its task profiles, how routing traces are calibrated, the cost
model, engine settings, the request workload and the sweep axes.

These schemas provide:
- Validation with the offending key path in every error
- Defaults for everything except the model shape, cost, workload and sweep
- Cross-reference checks between sections (task ids)
"""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from moesim.core.constants import (
    DEFAULT_INVOCATION_PERIOD,
    DEFAULT_PREDICTION_BLEND,
    DEFAULT_SAMPLE_PROMPTS,
    DEFAULT_SAMPLE_TOKENS,
    DEFAULT_SENSITIVITY_THRESHOLD,
    DEFAULT_SMOOTHING,
    DEFAULT_TOKEN_DISPERSION,
    MAX_OUTPUT_TOKENS,
    MODEL_PRESETS,
    SCHEMA_VERSION,
    EngineMode,
)
from moesim.core.engine.workload_generator import DEFAULT_TASK_SPECS
from moesim.utils.error_utils import ScenarioValidationError, error_handler
from moesim.utils.io_utils import read_json


# ======================
# Enums
# ======================


class ModelPreset(str, Enum):
    """Reference models with measured transfer and predictor costs."""

    OPENMOE = "openmoe"
    MIXTRAL = "mixtral"


# ======================
# Base Schema
# ======================


class BaseSchema(BaseModel):
    """Base schema with common configuration."""

    model_config = ConfigDict(
        extra="forbid",
        validate_assignment=True,
        use_enum_values=True,
    )


# ======================
# Sections
# ======================


class ModelSection(BaseSchema):
    """MoE model geometry."""

    name: str = Field(default="", max_length=255)
    num_moe_layers: int = Field(..., ge=1)
    experts_per_layer: int = Field(..., ge=1)
    top_k: int = Field(..., ge=1)
    expert_bytes: int = Field(..., gt=0)
    base_bytes: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _top_k_fits(self) -> "ModelSection":
        if self.top_k > self.experts_per_layer:
            raise ValueError(f"top_k ({self.top_k}) exceeds experts_per_layer ({self.experts_per_layer})")
        return self


class LengthSection(BaseSchema):
    """Log-normal token length given by mean and 90th percentile."""

    mean: float = Field(..., gt=0)
    p90: float = Field(..., gt=0)


class TaskSection(BaseSchema):
    """One task profile."""

    task_id: str = Field(..., min_length=1, max_length=64)
    name: Optional[str] = None
    keywords: List[str] = Field(..., min_length=1)
    input_length: LengthSection
    output_length: LengthSection
    slo_ttft: float = Field(..., gt=0)
    expected_output_tokens: Optional[float] = Field(default=None, gt=0)
    sensitivity: Optional[List[int]] = None
    accuracy_curve: Optional[List[Tuple[float, float]]] = None
    routing_skew: Optional[float] = Field(default=None, ge=0)
    prior_offset: Optional[int] = Field(default=None, ge=0)

    @field_validator("keywords")
    @classmethod
    def _keywords_not_blank(cls, value: List[str]) -> List[str]:
        if any(not k.strip() for k in value):
            raise ValueError("keywords must not be blank")
        return value

    @field_validator("sensitivity")
    @classmethod
    def _binary(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(v not in (0, 1) for v in value):
            raise ValueError("sensitivity entries must be 0 or 1")
        return value

    @model_validator(mode="after")
    def _one_sensitivity_source(self) -> "TaskSection":
        if self.sensitivity is not None and self.accuracy_curve is not None:
            raise ValueError("give either sensitivity or accuracy_curve, not both")
        return self


class CalibrationSection(BaseSchema):
    """Routing trace statistics and predictor training."""

    target_layer_corr: float = Field(default=0.5, ge=-1, le=1)
    target_prompt_corr: float = Field(default=0.5, ge=-1, le=1)
    layer_mixing: Optional[float] = Field(default=None, ge=0, le=1)
    prompt_mixing: Optional[float] = Field(default=None, ge=0, le=1)
    token_dispersion: float = Field(default=DEFAULT_TOKEN_DISPERSION, ge=0, le=1)
    routing_skew: float = Field(default=1.0, ge=0)
    sensitivity_threshold: float = Field(default=DEFAULT_SENSITIVITY_THRESHOLD, gt=0, lt=1)
    sample_prompts: int = Field(default=DEFAULT_SAMPLE_PROMPTS, ge=3)
    sample_tokens: int = Field(default=DEFAULT_SAMPLE_TOKENS, ge=2)
    training_prompts: int = Field(default=400, ge=2)
    tokens_per_prompt: int = Field(default=32, ge=1)
    smoothing: float = Field(default=DEFAULT_SMOOTHING, gt=0)


class CostSection(BaseSchema):
    """
    Cost model.

    The per-expert transfer time comes from, in order: ``per_expert_transfer``,
    ``full_transfer_seconds``, ``hd_bandwidth`` or the preset's measured
    full-model transfer time. Predictor costs default to the preset's.
    """

    preset: Optional[ModelPreset] = None
    per_token_cost: float = Field(..., gt=0)
    per_expert_transfer: Optional[float] = Field(default=None, gt=0)
    full_transfer_seconds: Optional[float] = Field(default=None, gt=0)
    hd_bandwidth: Optional[float] = Field(default=None, gt=0)
    transfer_setup: float = Field(default=0.0, ge=0)
    bandwidth_degradation: float = Field(default=1.0, ge=1)
    predictor_invocation_cost: Optional[float] = Field(default=None, ge=0)
    predictor_layerwise_cost: Optional[float] = Field(default=None, ge=0)
    contention_factor: float = Field(default=1.0, ge=1)

    @model_validator(mode="after")
    def _transfer_source(self) -> "CostSection":
        sources = (self.per_expert_transfer, self.full_transfer_seconds, self.hd_bandwidth, self.preset)
        if all(s is None for s in sources):
            raise ValueError("one of per_expert_transfer, full_transfer_seconds, hd_bandwidth or preset is required")
        return self

    def predictor_costs(self) -> Tuple[float, float]:
        """(all-layers cost, layerwise cost), falling back to the preset."""
        preset = MODEL_PRESETS[self.preset]["predictor_cost"] if self.preset else {}
        all_layers = self.predictor_invocation_cost
        if all_layers is None:
            all_layers = preset.get(EngineMode.EMOE_A.value, 0.0)
        layerwise = self.predictor_layerwise_cost
        if layerwise is None:
            layerwise = preset.get(EngineMode.EMOE_L.value, all_layers)
        return float(all_layers), float(layerwise)


class EngineSection(BaseSchema):
    """Engine settings shared by every sweep point."""

    token_budget: int = Field(default=4096, ge=1)
    task_aware: bool = True
    prediction_blend: float = Field(default=DEFAULT_PREDICTION_BLEND, ge=0, le=1)
    layer_budgets: Optional[List[Optional[int]]] = None


class WorkloadSection(BaseSchema):
    """Poisson request workload; the arrival rate comes from the sweep."""

    duration: float = Field(..., gt=0)
    max_requests: Optional[int] = Field(default=None, ge=1)
    max_output_tokens: int = Field(default=MAX_OUTPUT_TOKENS, ge=1)
    task_mix: Optional[Dict[str, float]] = None

    @field_validator("task_mix")
    @classmethod
    def _normalised(cls, value: Optional[Dict[str, float]]) -> Optional[Dict[str, float]]:
        if value is None:
            return value
        if any(v < 0 for v in value.values()):
            raise ValueError("task_mix weights must be non-negative")
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f"task_mix weights must sum to 1, got {sum(value.values()):.12g}")
        return value


class SweepSection(BaseSchema):
    """Sweep axes; every combination is one sweep point."""

    modes: List[EngineMode] = Field(..., min_length=1)
    budget_fractions: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    invocation_periods: List[int] = Field(default_factory=lambda: [DEFAULT_INVOCATION_PERIOD], min_length=1)
    arrival_rates: List[float] = Field(..., min_length=1)

    @field_validator("budget_fractions")
    @classmethod
    def _fractions(cls, value: List[float]) -> List[float]:
        if any(not 0 < v <= 1 for v in value):
            raise ValueError("budget fractions must be in (0, 1]")
        return value

    @field_validator("invocation_periods")
    @classmethod
    def _periods(cls, value: List[int]) -> List[int]:
        if any(v < 1 for v in value):
            raise ValueError("invocation periods must be >= 1")
        return value

    @field_validator("arrival_rates")
    @classmethod
    def _rates(cls, value: List[float]) -> List[float]:
        if any(v < 0 for v in value):
            raise ValueError("arrival rates must be non-negative")
        return value


class ScenarioConfig(BaseSchema):
    """Complete scenario file."""

    schema_version: Literal[1]
    name: str = Field(default="scenario", min_length=1, max_length=255)
    seed: int = Field(default=0, ge=0)
    model: ModelSection
    tasks: List[TaskSection] = Field(default_factory=list)
    default_task: Optional[str] = None
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    cost_model: CostSection
    engine: EngineSection = Field(default_factory=EngineSection)
    workload: WorkloadSection
    sweep: SweepSection


# ======================
# Loading
# ======================


def _key_path(loc: Tuple[Union[str, int], ...]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def _check_references(config: ScenarioConfig) -> None:
    """Cross-section checks pydantic cannot express per field."""
    if config.tasks:
        seen = set()
        for index, task in enumerate(config.tasks):
            if task.task_id in seen:
                raise ScenarioValidationError(
                    f"tasks.{index}.task_id: duplicate task id '{task.task_id}'",
                    {"key": f"tasks.{index}.task_id"},
                )
            seen.add(task.task_id)
            if task.sensitivity is not None and len(task.sensitivity) != config.model.num_moe_layers:
                raise ScenarioValidationError(
                    f"tasks.{index}.sensitivity: needs {config.model.num_moe_layers} entries",
                    {"key": f"tasks.{index}.sensitivity"},
                )
        known = seen
    else:
        known = {spec["task_id"] for spec in DEFAULT_TASK_SPECS}

    if config.default_task is not None and config.default_task not in known:
        raise ScenarioValidationError(
            f"default_task: unknown task '{config.default_task}'", {"key": "default_task"}
        )
    for key in sorted(config.workload.task_mix or {}):
        if key not in known:
            raise ScenarioValidationError(
                f"workload.task_mix.{key}: unknown task '{key}'", {"key": f"workload.task_mix.{key}"}
            )

    layer_budgets = config.engine.layer_budgets
    if layer_budgets is not None:
        if len(layer_budgets) != config.model.num_moe_layers:
            raise ScenarioValidationError(
                f"engine.layer_budgets: needs {config.model.num_moe_layers} entries",
                {"key": "engine.layer_budgets"},
            )
        for layer, budget in enumerate(layer_budgets):
            if budget is not None and not 1 <= budget <= config.model.experts_per_layer:
                raise ScenarioValidationError(
                    f"engine.layer_budgets.{layer}: {budget} outside [1, {config.model.experts_per_layer}]",
                    {"key": f"engine.layer_budgets.{layer}"},
                )


def parse_scenario(data: Dict) -> ScenarioConfig:
    """
    Validate a scenario document.

    Raises:
        ScenarioValidationError: The first problem found, with its key path
    """
    if isinstance(data, dict) and data.get("schema_version") not in (None, SCHEMA_VERSION):
        raise ScenarioValidationError(
            f"schema_version: unsupported version {data.get('schema_version')!r}", {"key": "schema_version"}
        )
    try:
        config = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        path = _key_path(tuple(first["loc"]))
        raise ScenarioValidationError(
            f"{path}: {first['msg']}",
            {"key": path, "errors": [{"key": _key_path(tuple(err["loc"])), "msg": err["msg"]} for err in e.errors()]},
        )
    _check_references(config)
    return config


@error_handler
def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    """Read and validate a scenario file."""
    try:
        data = read_json(path)
    except ValueError as e:
        raise ScenarioValidationError(f"{path}: not valid JSON ({e})", {"path": str(path)})
    return parse_scenario(data)
