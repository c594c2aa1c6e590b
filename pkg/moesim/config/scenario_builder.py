"""
Turn a validated scenario file into simulation inputs.

Builds the model shape, task profiles, calibrated routing statistics, cost
model and trained predictor once per scenario, then one SimulationInput per
sweep point.

Classes:
    ScenarioBundle: Everything shared by the sweep points of a scenario
    SweepPoint: One (mode, budget fraction, period, arrival rate) combination

Functions:
    build_scenario: ScenarioConfig -> ScenarioBundle
    build_point: ScenarioBundle + SweepPoint -> SimulationInput
    sweep_points: Cartesian product of the sweep axes, in key order
"""

import itertools
import logging
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from moesim.config.schemas import CostSection, ScenarioConfig, TaskSection
from moesim.core.constants import MODEL_PRESETS, EngineMode
from moesim.core.engine.expert_store import derive_sensitivity
from moesim.core.engine.predictor import MarkovExpertPredictor, TransitionModel, fit
from moesim.core.engine.simulator import SimulationInput
from moesim.core.engine.workload_generator import (
    calibrate_trace,
    calibrated_matrices,
    default_task_profiles,
    gen_request_trace,
    gen_routing_trace,
    skewed_routing_prior,
)
from moesim.core.models.cost_model import CostModel, EngineConfig, budgets_from_fraction
from moesim.core.models.model_shape import ModelShape
from moesim.core.models.routing_trace import RoutingTrace, TraceCalibration
from moesim.core.models.task_profile import LengthDistribution, TaskProfile

logger = logging.getLogger(__name__)

# Offsets of the derived random streams from the scenario seed
_TRAINING_STREAM = 1
_SERVING_STREAM = 2


@dataclass(frozen=True, order=True)
class SweepPoint:
    """One sweep point; ordering follows the summary's row order."""

    mode: str
    budget_fraction: float
    invocation_period: int
    arrival_rate: float

    @property
    def key(self) -> str:
        return (
            f"{self.mode}_phi{self.budget_fraction:g}"
            f"_p{self.invocation_period}_rate{self.arrival_rate:g}"
        )


@dataclass(eq=False)
class ScenarioBundle:
    """Scenario-wide inputs shared by every sweep point."""

    config: ScenarioConfig
    seed: int
    shape: ModelShape
    profiles: List[TaskProfile]
    calibration: TraceCalibration
    cost: CostModel
    training_trace: RoutingTrace
    model: TransitionModel
    predictor: MarkovExpertPredictor


def _build_shape(config: ScenarioConfig) -> ModelShape:
    section = config.model
    return ModelShape(
        num_moe_layers=section.num_moe_layers,
        experts_per_layer=section.experts_per_layer,
        top_k=section.top_k,
        expert_bytes=section.expert_bytes,
        base_bytes=section.base_bytes,
        name=section.name or config.name,
    )


def _build_task(task: TaskSection, index: int, shape: ModelShape, config: ScenarioConfig) -> TaskProfile:
    calibration = config.calibration
    if task.sensitivity is not None:
        sensitivity = np.asarray(task.sensitivity, dtype=np.int64)
    elif task.accuracy_curve is not None:
        sensitivity = derive_sensitivity(task.accuracy_curve, shape.num_moe_layers, calibration.sensitivity_threshold)
    else:
        sensitivity = np.ones(shape.num_moe_layers, dtype=np.int64)
    skew = task.routing_skew if task.routing_skew is not None else calibration.routing_skew
    offset = task.prior_offset if task.prior_offset is not None else index * 3
    return TaskProfile(
        task_id=task.task_id,
        name=task.name or task.task_id,
        keywords=tuple(task.keywords),
        output_length_dist=LengthDistribution(task.output_length.mean, task.output_length.p90),
        input_length_dist=LengthDistribution(task.input_length.mean, task.input_length.p90),
        expected_output_tokens=task.expected_output_tokens or task.output_length.mean,
        slo_ttft=task.slo_ttft,
        sensitivity=sensitivity,
        routing_prior=skewed_routing_prior(shape, skew, offset=offset),
    )


def _build_profiles(config: ScenarioConfig, shape: ModelShape) -> List[TaskProfile]:
    if not config.tasks:
        return default_task_profiles(
            shape, config.calibration.routing_skew, config.calibration.sensitivity_threshold
        )
    return [_build_task(task, index, shape, config) for index, task in enumerate(config.tasks)]


def _build_cost(section: CostSection, shape: ModelShape) -> CostModel:
    all_layers, layerwise = section.predictor_costs()
    extra_layers = max(1, shape.num_moe_layers - 1)
    predictor = {
        "predictor_invocation_cost": all_layers,
        "predictor_layer_cost": max(0.0, layerwise - all_layers) / extra_layers,
        "contention_factor": section.contention_factor,
    }
    if section.per_expert_transfer is not None:
        return CostModel(
            per_token_cost=section.per_token_cost,
            per_expert_transfer=section.per_expert_transfer,
            hd_bandwidth=shape.expert_bytes / section.per_expert_transfer,
            **predictor,
        )
    if section.full_transfer_seconds is not None or section.hd_bandwidth is None:
        full = section.full_transfer_seconds or MODEL_PRESETS[section.preset]["full_transfer_seconds"]
        return CostModel.calibrated(shape, section.per_token_cost, full, **predictor)
    return CostModel.from_bandwidth(
        shape,
        section.per_token_cost,
        section.hd_bandwidth,
        transfer_setup=section.transfer_setup,
        bandwidth_degradation=section.bandwidth_degradation,
        **predictor,
    )


def _task_sequence(config: ScenarioConfig, profiles: List[TaskProfile], count: int, seed: int) -> List[str]:
    """Task label per prompt drawn from the workload's task mix."""
    ids = [p.task_id for p in profiles]
    mix = config.workload.task_mix
    weights = np.full(len(ids), 1.0 / len(ids)) if mix is None else np.array([mix.get(t, 0.0) for t in ids])
    rng = np.random.default_rng(seed)
    return [ids[i] for i in rng.choice(len(ids), size=count, p=weights / weights.sum())]


def _build_calibration(config: ScenarioConfig, shape: ModelShape, profiles: List[TaskProfile], seed: int) -> TraceCalibration:
    section = config.calibration
    if section.layer_mixing is not None and section.prompt_mixing is not None:
        layer, prompt = calibrated_matrices(shape, section.layer_mixing, section.prompt_mixing)
        return TraceCalibration(
            layer_transition=layer,
            prompt_transition=prompt,
            target_layer_corr=section.target_layer_corr,
            target_prompt_corr=section.target_prompt_corr,
            rng_seed=seed,
            token_dispersion=section.token_dispersion,
        )
    return calibrate_trace(
        shape,
        section.target_layer_corr,
        section.target_prompt_corr,
        seed=seed,
        token_dispersion=section.token_dispersion,
        sample_prompts=section.sample_prompts,
        sample_tokens=section.sample_tokens,
        profiles=profiles,
        task_ids=_task_sequence(config, profiles, section.sample_prompts, seed),
    )


def build_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> ScenarioBundle:
    """
    Build the scenario-wide inputs.

    Args:
        config: Validated scenario
        seed: Overrides the scenario's seed

    Returns:
        ScenarioBundle with a predictor trained on a separate training trace
    """
    seed = config.seed if seed is None else int(seed)
    shape = _build_shape(config)
    profiles = _build_profiles(config, shape)
    calibration = _build_calibration(config, shape, profiles, seed)

    section = config.calibration
    training_seed = seed + _TRAINING_STREAM
    training_trace = gen_routing_trace(
        shape,
        replace(calibration, rng_seed=training_seed),
        section.training_prompts,
        section.tokens_per_prompt,
        task_ids=_task_sequence(config, profiles, section.training_prompts, training_seed),
        profiles=profiles,
    )
    model = fit(training_trace, smoothing=section.smoothing)
    logger.info(
        f"Scenario '{config.name}': {shape.num_moe_layers} layers x {shape.experts_per_layer} experts, "
        f"{len(profiles)} tasks, predictor trained on {len(training_trace)} prompts"
    )
    return ScenarioBundle(
        config=config,
        seed=seed,
        shape=shape,
        profiles=profiles,
        calibration=calibration,
        cost=_build_cost(config.cost_model, shape),
        training_trace=training_trace,
        model=model,
        predictor=MarkovExpertPredictor(model),
    )


def sweep_points(config: ScenarioConfig, modes: Optional[List[str]] = None) -> List[SweepPoint]:
    """Every sweep point, sorted; ``modes`` restricts the mode axis."""
    chosen = [EngineMode(m).value for m in config.sweep.modes]
    if modes:
        wanted = {EngineMode(m).value for m in modes}
        chosen = [m for m in chosen if m in wanted]
    points = {
        SweepPoint(mode, float(phi), int(period), float(rate))
        for mode, phi, period, rate in itertools.product(
            chosen,
            config.sweep.budget_fractions,
            config.sweep.invocation_periods,
            config.sweep.arrival_rates,
        )
    }
    return sorted(points)


def build_point(bundle: ScenarioBundle, point: SweepPoint) -> SimulationInput:
    """
    Inputs of one sweep point.

    Requests and the serving routing trace depend only on the seed and the
    arrival rate, so every mode at a rate serves the same workload.
    """
    config = bundle.config
    workload = config.workload
    serving_seed = bundle.seed + _SERVING_STREAM
    requests = gen_request_trace(
        point.arrival_rate,
        workload.duration,
        workload.task_mix,
        serving_seed,
        bundle.profiles,
        max_requests=workload.max_requests,
        max_output_tokens=workload.max_output_tokens,
    )
    trace = gen_routing_trace(
        bundle.shape,
        replace(bundle.calibration, rng_seed=serving_seed),
        max(1, len(requests)),
        config.calibration.tokens_per_prompt,
        task_ids=[r.task_id for r in requests] or None,
        profiles=bundle.profiles,
    )
    engine = EngineConfig(
        mode=EngineMode(point.mode),
        budgets=budgets_from_fraction(bundle.shape, point.budget_fraction, config.engine.layer_budgets),
        token_budget=config.engine.token_budget,
        invocation_period=point.invocation_period,
        seed=bundle.seed,
        task_aware=config.engine.task_aware,
        prediction_blend=config.engine.prediction_blend,
    )
    return SimulationInput(
        shape=bundle.shape,
        profiles=bundle.profiles,
        requests=requests,
        trace=trace,
        config=engine,
        cost=bundle.cost,
        predictor=bundle.predictor,
    )
