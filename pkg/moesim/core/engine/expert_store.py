"""
Expert placement engine for moesim.

Computes expected token loads per expert, selects which experts fit the
device budget, plans host/device transfers and resolves token routing
against the current placement.

Functions:
    expected_tokens: Expected tokens per task, layer and expert
    select_experts: Top-L experts per layer
    plan_loading: Evict/load plan between two placements, with Delta E
    plan_task_aware: Plan that skips loads insensitive layers do not need
    route_token / route_batch: Resolve gate choices against residency
    derive_sensitivity: Per-layer sensitivity bits from an accuracy curve
"""

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from moesim.core.constants import DEFAULT_SENSITIVITY_THRESHOLD
from moesim.core.models.cost_model import CostModel
from moesim.core.models.model_shape import ModelShape
from moesim.core.models.placement import ExpectedTokens3D, LayerPlan, LoadingPlan, Placement
from moesim.core.models.request import Request
from moesim.core.models.task_profile import TaskProfile, profiles_by_id
from moesim.utils.error_utils import RoutingError, ScenarioValidationError

logger = logging.getLogger(__name__)

FREQUENCY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RouteResult:
    """Expert a token was routed to and whether its top choice was resident."""

    expert: int
    hit: bool


def expected_tokens(
    profiles: Sequence[TaskProfile],
    running: Sequence[Request],
    incoming: Sequence[Request],
    frequencies: Mapping[str, np.ndarray],
    task_aware: bool = True,
) -> ExpectedTokens3D:
    """
    Expected number of tokens routed to each expert.

    For every task with T matching requests (running plus incoming):
    N = (sum of their input tokens + T * W_o) * s * f, per layer and expert,
    where s is the task's sensitivity bit for the layer (1 everywhere when
    ``task_aware`` is False) and f its expert frequency row.

    Args:
        profiles: Task profiles (define W_o and s)
        running: Requests already admitted
        incoming: Requests about to be scheduled
        frequencies: Per task, (m, E) rows summing to 1
        task_aware: Apply the sensitivity mask

    Raises:
        ScenarioValidationError: Unknown task or malformed frequencies
    """
    index = profiles_by_id(profiles)
    requests = list(running) + list(incoming)
    for request in requests:
        if request.task_id not in index:
            raise ScenarioValidationError(f"request {request.request_id}: unknown task '{request.task_id}'")

    task_ids = tuple(p.task_id for p in profiles)
    m = profiles[0].num_layers if profiles else 0
    e = profiles[0].routing_prior.shape[1] if profiles else 0
    per_task = np.zeros((len(task_ids), m, e))

    totals: Dict[str, List[int]] = {}
    for request in requests:
        totals.setdefault(request.task_id, []).append(request.input_tokens)

    for row, profile in enumerate(profiles):
        inputs = totals.get(profile.task_id)
        if not inputs:
            continue
        freq = frequencies.get(profile.task_id)
        if freq is None:
            raise ScenarioValidationError(f"no expert frequencies for task '{profile.task_id}'")
        freq = np.asarray(freq, dtype=float)
        if freq.shape != (m, e):
            raise ScenarioValidationError(f"task '{profile.task_id}': frequencies must have shape {(m, e)}")
        if np.any(np.abs(freq.sum(axis=1) - 1.0) > FREQUENCY_TOLERANCE):
            raise ScenarioValidationError(f"task '{profile.task_id}': frequency rows must sum to 1")

        volume = float(sum(inputs)) + len(inputs) * profile.expected_output_tokens
        mask = profile.sensitivity if task_aware else np.ones(m)
        per_task[row] = volume * mask[:, None] * freq

    return ExpectedTokens3D(task_ids=task_ids, per_task=per_task)


def _check_budgets(shape: ModelShape, budgets: Sequence[int]) -> Tuple[int, ...]:
    budgets = tuple(int(b) for b in budgets)
    if len(budgets) != shape.num_moe_layers:
        raise ScenarioValidationError(f"budgets need {shape.num_moe_layers} entries, got {len(budgets)}")
    for layer, budget in enumerate(budgets):
        if not 0 <= budget <= shape.experts_per_layer:
            raise ScenarioValidationError(f"budget {budget} at layer {layer} outside [0, {shape.experts_per_layer}]")
    return budgets


def _layer_order(scores: np.ndarray, resident: Optional[FrozenSet[int]] = None) -> np.ndarray:
    """Experts by descending score, then resident first (if given), then ascending index."""
    e = scores.shape[0]
    index = np.arange(e)
    not_resident = np.ones(e, dtype=int)
    if resident:
        not_resident[sorted(resident)] = 0
    else:
        not_resident[:] = 0
    return np.lexsort((index, not_resident, -scores))


def select_experts(
    expected: ExpectedTokens3D,
    shape: ModelShape,
    budgets: Sequence[int],
    current: Optional[Placement] = None,
) -> List[FrozenSet[int]]:
    """
    Pick the L experts with the largest aggregated expected tokens per layer.

    Ties go to ascending expert index. With ``current`` given, experts that
    are already resident win ties against non-resident ones first.
    """
    budgets = _check_budgets(shape, budgets)
    aggregate = expected.aggregate
    if aggregate.shape != (shape.num_moe_layers, shape.experts_per_layer):
        raise ScenarioValidationError(f"expected tokens must have shape {(shape.num_moe_layers, shape.experts_per_layer)}")
    targets = []
    for layer in range(shape.num_moe_layers):
        resident = current.resident[layer] if current is not None else None
        order = _layer_order(aggregate[layer], resident)
        targets.append(frozenset(int(x) for x in order[: budgets[layer]]))
    return targets


def plan_loading(
    current: Placement,
    target: Sequence[FrozenSet[int]],
    cost: CostModel,
    scores: Optional[np.ndarray] = None,
    budgets: Optional[Sequence[int]] = None,
) -> LoadingPlan:
    """
    Plan the transfers from ``current`` to ``target``.

    Per layer, evictions are current minus target and loads are target minus
    current, loads ordered by descending score (ascending index without
    scores). Delta E sums the per-layer load windows because a layer's loads
    start only once the previous layer's have finished.

    Args:
        current: Placement before the plan
        target: Desired resident set per layer
        cost: Supplies the per-expert transfer time
        scores: Optional (m, E) expected tokens used to prioritise loads
        budgets: Budgets of the resulting placement (default: current's)

    Raises:
        ScenarioValidationError: A target set exceeds its budget
    """
    shape = current.shape
    budgets = _check_budgets(shape, budgets if budgets is not None else current.budgets)
    if len(target) != shape.num_moe_layers:
        raise ScenarioValidationError(f"target needs {shape.num_moe_layers} layers, got {len(target)}")

    layers = []
    for layer, wanted in enumerate(target):
        wanted = frozenset(int(x) for x in wanted)
        if len(wanted) > budgets[layer]:
            raise ScenarioValidationError(
                f"layer {layer}: target of {len(wanted)} experts exceeds budget {budgets[layer]}"
            )
        have = current.resident[layer]
        evictions = tuple(sorted(have - wanted))
        loads = list(wanted - have)
        if scores is not None:
            layer_scores = np.asarray(scores)[layer]
            loads.sort(key=lambda x: (-layer_scores[x], x))
        else:
            loads.sort()
        layers.append(LayerPlan(layer=layer, evictions=evictions, loads=tuple(loads)))

    return LoadingPlan(layers=tuple(layers), per_expert_transfer=cost.per_expert_transfer, budgets=budgets)


def plan_task_aware(
    current: Placement,
    agnostic_target: Sequence[FrozenSet[int]],
    masked: ExpectedTokens3D,
    agnostic: ExpectedTokens3D,
    budgets: Sequence[int],
    cost: CostModel,
) -> LoadingPlan:
    """
    Restrict a task-agnostic plan to the loads sensitive layers need.

    An expert is loaded only if the agnostic plan would load it and it is
    also among the top-L experts by masked (sensitivity-weighted) load.
    Just enough residents outside the agnostic target are evicted to stay
    within budget, lowest masked load first. The loads are a subset of the
    agnostic plan's, so its Delta E never exceeds the agnostic one.
    """
    shape = current.shape
    budgets = _check_budgets(shape, budgets)
    masked_scores = masked.aggregate
    agnostic_scores = agnostic.aggregate
    masked_target = select_experts(masked, shape, budgets, current)

    layers = []
    for layer in range(shape.num_moe_layers):
        have = current.resident[layer]
        wanted = frozenset(agnostic_target[layer])
        loads = sorted(
            (wanted - have) & masked_target[layer],
            key=lambda x: (-masked_scores[layer][x], -agnostic_scores[layer][x], x),
        )
        surplus = len(have) + len(loads) - budgets[layer]
        candidates = sorted(
            have - wanted,
            key=lambda x: (masked_scores[layer][x], agnostic_scores[layer][x], -x),
        )
        evictions = tuple(sorted(candidates[: max(0, surplus)]))
        layers.append(LayerPlan(layer=layer, evictions=evictions, loads=tuple(loads)))

    return LoadingPlan(layers=tuple(layers), per_expert_transfer=cost.per_expert_transfer, budgets=budgets)


def _fallback_expert(resident: FrozenSet[int], layer_scores: Optional[np.ndarray]) -> int:
    if layer_scores is None:
        return min(resident)
    return min(resident, key=lambda x: (-float(layer_scores[x]), x))


def route_token(
    gate_choice: Sequence[int],
    placement: Placement,
    layer: int,
    scores: Optional[np.ndarray] = None,
) -> RouteResult:
    """
    Route one token at one layer.

    Returns the highest-ranked resident gate choice (a hit only for rank 0);
    when none is resident, the resident expert with the highest expected
    load at the layer (ties to the lower index).

    Args:
        gate_choice: Ranked top-k expert indices
        placement: Current placement
        layer: MoE layer
        scores: Optional (m, E) expected tokens for the fallback

    Raises:
        RoutingError: The layer has no resident expert
    """
    resident = placement.resident[layer]
    if not resident:
        raise RoutingError(f"layer {layer} has no resident expert")
    for rank, expert in enumerate(gate_choice):
        if int(expert) in resident:
            return RouteResult(expert=int(expert), hit=rank == 0)
    layer_scores = None if scores is None else np.asarray(scores)[layer]
    return RouteResult(expert=_fallback_expert(resident, layer_scores), hit=False)


def route_batch(
    gate_choices: np.ndarray,
    placement: Placement,
    layer: int,
    scores: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised ``route_token`` for a (tokens, k) block at one layer.

    Returns:
        Tuple (experts, hits) of shape (tokens,)
    """
    resident = placement.resident[layer]
    if not resident:
        raise RoutingError(f"layer {layer} has no resident expert")
    gate_choices = np.asarray(gate_choices, dtype=np.int64)
    mask = np.zeros(placement.shape.experts_per_layer, dtype=bool)
    mask[sorted(resident)] = True
    present = mask[gate_choices]
    any_present = present.any(axis=1)
    first = present.argmax(axis=1)
    chosen = gate_choices[np.arange(gate_choices.shape[0]), first]
    layer_scores = None if scores is None else np.asarray(scores)[layer]
    fallback = _fallback_expert(resident, layer_scores)
    experts = np.where(any_present, chosen, fallback)
    return experts, present[:, 0]


def derive_sensitivity(
    curve: Sequence[Tuple[float, float]],
    num_layers: int,
    threshold: float = DEFAULT_SENSITIVITY_THRESHOLD,
) -> np.ndarray:
    """
    Sensitivity bits from a progressive-randomisation accuracy curve.

    ``curve`` holds (fraction of layers routed accurately, accuracy) points.
    Layer l is insensitive (0) when randomising layers 0..l still leaves the
    interpolated accuracy strictly above ``threshold``.

    Examples:
        >>> derive_sensitivity([(0.0, 0.6), (0.5, 0.82), (1.0, 0.98)], 4)
        array([0, 1, 1, 1])
    """
    points = sorted((float(f), float(a)) for f, a in curve)
    if not points:
        raise ScenarioValidationError("accuracy curve needs at least one point")
    fractions = np.array([p[0] for p in points])
    accuracy = np.array([p[1] for p in points])
    if fractions.min() < 0 or fractions.max() > 1:
        raise ScenarioValidationError("accuracy curve fractions must be in [0, 1]")
    accurate = 1.0 - (np.arange(num_layers) + 1.0) / num_layers
    interpolated = np.interp(accurate, fractions, accuracy)
    return np.where(interpolated > threshold, 0, 1).astype(np.int64)
