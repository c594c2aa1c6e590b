"""
Discrete-event simulation of MoE inference serving.

The engine advances virtual time over four event kinds (arrival, iteration,
predictor call and per-layer load completion), runs continuous-batching
iterations under a linear cost model and, depending on the mode, keeps all
experts resident, transfers them on demand, or re-plans the resident set
at predictor invocations.

Classes:
    SimulationInput: Everything one run needs
    PredictorInterval: Busy interval of one predictor call
    TokenEvent: One generated token
    IterationResult: Outcome of one batch iteration
    Simulator: Event loop over a SimulationInput

Functions:
    run: Simulate a scenario and collect its metrics
    iteration_step: One iteration against a fixed placement
    on_demand_step: One iteration that transfers the experts it needs
    invoke_predictor: Predict the next prompt's experts and time the call
    invocation_schedule: Prompt indices that trigger a re-plan
"""

import copy
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from moesim.core.constants import EngineMode, EventKind, PredictionVariant, RequestState, ScheduleReason
from moesim.core.engine.events import EventLog, EventQueue, LogKind, ScheduledEvent
from moesim.core.engine.expert_store import (
    expected_tokens,
    plan_loading,
    plan_task_aware,
    route_batch,
    select_experts,
)
from moesim.core.engine.metrics import Metrics, collect_metrics
from moesim.core.engine.predictor import ExpertPredictor, Prediction
from moesim.core.engine.scheduler import (
    SchedulerState,
    force_admit,
    schedule_with_decisions,
    slo_order_key,
    update_generation_estimate,
)
from moesim.core.models.cost_model import CostModel, EngineConfig
from moesim.core.models.model_shape import ModelShape
from moesim.core.models.placement import LoadingPlan, Placement
from moesim.core.models.request import Request
from moesim.core.models.routing_trace import RoutingTrace
from moesim.core.models.task_profile import TaskProfile, profiles_by_id
from moesim.utils.error_utils import ScenarioValidationError, error_handler
from moesim.utils.stats_utils import normalize_rows

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SimulationInput:
    """
    Inputs of one simulation run.

    Attributes:
        shape: Model geometry
        profiles: Task profiles referenced by the requests
        requests: Request trace (not modified by the run)
        trace: Routing trace replayed by the requests' prompt indices
        config: Engine settings
        cost: Cost model
        predictor: Expert predictor; required by prediction modes
    """

    shape: ModelShape
    profiles: Sequence[TaskProfile]
    requests: Sequence[Request]
    trace: RoutingTrace
    config: EngineConfig
    cost: CostModel
    predictor: Optional[ExpertPredictor] = None

    def validate(self) -> None:
        """Check that every part agrees with the model shape and with each other."""
        self.config.validate(self.shape)
        profiles = profiles_by_id(self.profiles)
        m, e = self.shape.num_moe_layers, self.shape.experts_per_layer
        for profile in profiles.values():
            if profile.num_layers != m or profile.routing_prior.shape != (m, e):
                raise ScenarioValidationError(
                    f"task '{profile.task_id}' is profiled for a different model shape",
                    {"task_id": profile.task_id},
                )
        if self.requests:
            if len(self.trace) == 0:
                raise ScenarioValidationError("routing trace is empty")
            self.trace.validate(self.shape)
        seen = set()
        for request in self.requests:
            if request.request_id in seen:
                raise ScenarioValidationError(f"duplicate request id {request.request_id}")
            seen.add(request.request_id)
            if request.task_id not in profiles:
                raise ScenarioValidationError(
                    f"request {request.request_id} references unknown task '{request.task_id}'",
                    {"request_id": request.request_id, "task_id": request.task_id},
                )
            if request.state is not RequestState.WAITING or request.generated_tokens:
                raise ScenarioValidationError(f"request {request.request_id} has already been served")
        if self.config.mode.uses_prediction and self.predictor is None:
            raise ScenarioValidationError(f"mode '{self.config.mode.value}' needs a predictor")


@dataclass(frozen=True)
class PredictorInterval:
    """Predictor busy time [start, end) of one invocation."""

    prompt_index: int
    start: float
    end: float

    @property
    def cost(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class TokenEvent:
    request_id: int
    token_index: int
    first_token: bool
    completed: bool


@dataclass(eq=False)
class IterationResult:
    """
    Outcome of one iteration.

    Attributes:
        elapsed: Seconds the iteration takes
        processed_tokens: Prompt tokens prefilled plus one generated token per request
        hits: Token-layers whose top gate choice was resident
        lookups: Token-layers routed
        token_events: One entry per request in the batch
        transfer_time: Seconds of expert transfer inside the iteration (on-demand modes)
        placement: Placement after the iteration (on-demand modes)
    """

    elapsed: float
    processed_tokens: int
    hits: int
    lookups: int
    token_events: List[TokenEvent] = field(default_factory=list)
    transfer_time: float = 0.0
    placement: Optional[Placement] = None


def invocation_schedule(num_prompts: int, mode: EngineMode, period: int) -> List[int]:
    """
    Prompt indices that trigger a re-plan.

    Prompt 0 always appears; it stands for the initial full load. ``emoe_e``
    fires on every prompt, the other re-planning modes on multiples of
    ``period``; the remaining modes never re-plan.

    Examples:
        >>> invocation_schedule(81, EngineMode.EMOE_A, 40)
        [0, 40, 80]
    """
    mode = EngineMode(mode)
    if period < 1:
        raise ScenarioValidationError(f"invocation period must be >= 1, got {period}")
    if not mode.replans_periodically:
        return []
    if mode is EngineMode.EMOE_E:
        return list(range(num_prompts))
    return list(range(0, num_prompts, period))


def _invokes_at(prompt_index: int, mode: EngineMode, period: int) -> bool:
    if not mode.replans_periodically:
        return False
    return mode is EngineMode.EMOE_E or prompt_index % period == 0


def invoke_predictor(
    predictor: ExpertPredictor,
    history: np.ndarray,
    config: EngineConfig,
    cost: CostModel,
    shape: ModelShape,
    now: float = 0.0,
    prompt_index: int = 0,
) -> Tuple[Prediction, PredictorInterval]:
    """
    Predict the next prompt's experts from the previous prompt's routing.

    ``emoe_l`` chains layer by layer; the other prediction modes predict all
    layers at once.

    Returns:
        Tuple (prediction, busy interval starting at ``now``)

    Raises:
        ScenarioValidationError: The mode does not use prediction
    """
    if not config.mode.uses_prediction:
        raise ScenarioValidationError(f"mode '{config.mode.value}' does not use the predictor")
    variant = PredictionVariant.LAYERWISE if config.mode is EngineMode.EMOE_L else PredictionVariant.ALL_LAYERS
    prediction = predictor.predict_prompt(history, shape.top_k, variant)
    busy = cost.predictor_cost(config.mode, shape.num_moe_layers)
    return prediction, PredictorInterval(prompt_index=prompt_index, start=now, end=now + busy)


def _gate_block(batch: Sequence[Request], trace: RoutingTrace) -> np.ndarray:
    """(B, m, k) gate choices of each request's next token."""
    rows = []
    for request in batch:
        routing = trace[request.prompt_index % len(trace)]
        rows.append(routing[:, request.generated_tokens % routing.shape[1], :])
    return np.stack(rows)


def _processed_tokens(batch: Sequence[Request]) -> int:
    return sum(r.input_tokens for r in batch if r.needs_prefill) + len(batch)


def _advance(batch: Sequence[Request], elapsed: float) -> List[TokenEvent]:
    events = []
    for request in batch:
        first = request.needs_prefill
        request.generated_tokens += 1
        request.runtime_so_far += elapsed
        update_generation_estimate(request)
        events.append(TokenEvent(request.request_id, request.generated_tokens - 1, first, request.is_complete))
    return events


def iteration_step(
    batch: Sequence[Request],
    placement: Placement,
    trace: RoutingTrace,
    cost: CostModel,
    contended: bool = False,
    scores: Optional[np.ndarray] = None,
) -> IterationResult:
    """
    Generate one token for every running request against a fixed placement.

    Elapsed time is (tokens processed) * c, scaled by the contention factor
    while a transfer or predictor call is in flight. Requests that have not
    started yet also prefill their prompt in this iteration.

    Args:
        batch: Running requests (updated in place)
        placement: Resident experts during the iteration
        trace: Routing trace the requests replay
        cost: Cost model
        contended: A transfer or predictor call overlaps the iteration
        scores: (m, E) expected tokens used by the routing fallback

    Examples:
        Three prefilled requests with c=0.001 take 0.003 s, or 0.0045 s
        with contention factor 1.5.
    """
    if not batch:
        raise ScenarioValidationError("iteration needs a non-empty batch")
    processed = _processed_tokens(batch)
    factor = cost.contention_factor if contended else 1.0
    elapsed = processed * cost.per_token_cost * factor

    gates = _gate_block(batch, trace)
    hits = 0
    for layer in range(gates.shape[1]):
        _, layer_hits = route_batch(gates[:, layer, :], placement, layer, scores)
        hits += int(layer_hits.sum())
    lookups = gates.shape[0] * gates.shape[1]

    return IterationResult(
        elapsed=elapsed,
        processed_tokens=processed,
        hits=hits,
        lookups=lookups,
        token_events=_advance(batch, elapsed),
    )


def on_demand_step(
    batch: Sequence[Request],
    placement: Placement,
    trace: RoutingTrace,
    cost: CostModel,
    pipelined: bool = False,
    contended: bool = False,
) -> IterationResult:
    """
    Iteration that makes each layer's needed experts resident first.

    The resident set of every layer becomes exactly the experts the batch's
    tokens choose at that layer. Without pipelining transfers and compute
    run back to back; with pipelining the next layer's transfer overlaps the
    current layer's compute, and overlapped compute pays the contention
    factor.
    """
    if not batch:
        raise ScenarioValidationError("iteration needs a non-empty batch")
    shape = placement.shape
    m = shape.num_moe_layers
    processed = _processed_tokens(batch)
    compute = processed * cost.per_token_cost

    gates = _gate_block(batch, trace)
    needed = [frozenset(int(x) for x in np.unique(gates[:, layer, :])) for layer in range(m)]
    transfers = [len(needed[layer] - placement.resident[layer]) * cost.per_expert_transfer for layer in range(m)]
    transfer_time = float(sum(transfers))

    if not pipelined:
        elapsed = transfer_time + compute * (cost.contention_factor if contended else 1.0)
    else:
        per_layer = compute / m
        elapsed = transfers[0]
        for layer in range(m):
            upcoming = transfers[layer + 1] if layer + 1 < m else 0.0
            overlapped = upcoming > 0 or contended
            elapsed += max(per_layer * (cost.contention_factor if overlapped else 1.0), upcoming)

    lookups = gates.shape[0] * m
    return IterationResult(
        elapsed=elapsed,
        processed_tokens=processed,
        hits=lookups,
        lookups=lookups,
        token_events=_advance(batch, elapsed),
        transfer_time=transfer_time,
        placement=Placement.from_sets(shape, needed, budgets=(shape.experts_per_layer,) * m),
    )


def _fmt(value: float) -> str:
    return f"{value:.17g}"


class Simulator:
    """
    Single-owner event loop over one SimulationInput.

    The input is validated up front and its requests are copied, so the same
    input can be run again with identical results.
    """

    def __init__(self, scenario: SimulationInput):
        scenario.validate()
        self.scenario = scenario
        self.shape = scenario.shape
        self.config = scenario.config
        self.cost = scenario.cost
        self.mode = scenario.config.mode
        self.trace = scenario.trace
        self.predictor = scenario.predictor
        self.profiles = list(scenario.profiles)

        self.requests: Dict[int, Request] = {r.request_id: r for r in copy.deepcopy(list(scenario.requests))}
        self.queue = EventQueue()
        self.log = EventLog()
        self.rng = np.random.default_rng(self.config.seed)
        self.state = SchedulerState(token_budget=self.config.token_budget)
        self.now = 0.0

        # Live placement follows completed layer loads; committed includes planned ones
        self.placement = Placement.full(self.shape)
        self.committed = self.placement
        self.scores: Optional[np.ndarray] = None
        self.delta_e = 0.0
        self.transfer_free_at = 0.0
        self.predictor_busy_until = 0.0
        self.blocked_until = 0.0

        self.iteration_pending = False
        self.in_flight: List[TokenEvent] = []
        self._plan_ids = itertools.count()
        self._on_demand_transfer = 0.0
        self._on_demand_iterations = 0

    # ------------------------------------------------------------------
    # Driver
    # ------------------------------------------------------------------

    @error_handler
    def run(self) -> Metrics:
        self._record_memory()
        for request in sorted(self.requests.values(), key=lambda r: (r.arrival_time, r.request_id)):
            self.queue.push(request.arrival_time, EventKind.ARRIVAL, request_id=request.request_id)

        handlers = {
            EventKind.LOAD_COMPLETE: self._on_load_complete,
            EventKind.ITERATION: self._on_iteration,
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.PREDICTOR: self._on_predictor,
        }
        processed = 0
        while self.queue:
            event = self.queue.pop()
            self.now = event.time
            handlers[event.kind](event)
            processed += 1

        metrics = collect_metrics(self.log)
        logger.info(
            f"{self.mode.value}: {processed} events, {metrics.total_tokens} tokens, "
            f"hit rate {metrics.hit_rate:.4f}, makespan {metrics.makespan:.3f}s"
        )
        return metrics

    def event_frame(self) -> pd.DataFrame:
        return self.log.to_frame()

    # ------------------------------------------------------------------
    # Handlers
    # ------------------------------------------------------------------

    def _on_arrival(self, event: ScheduledEvent) -> None:
        request = self.requests[event.payload["request_id"]]
        self.log.append(
            self.now, LogKind.ARRIVAL, request_id=request.request_id,
            value=request.slo_ttft, count=request.input_tokens, detail=request.task_id,
        )
        if request.input_tokens >= self.config.token_budget:
            self.log.append(self.now, LogKind.DROP, request_id=request.request_id, count=request.input_tokens)
            self.log.append(
                self.now, LogKind.DECISION, request_id=request.request_id, count=0,
                detail=ScheduleReason.DROPPED.value,
            )
            logger.warning(f"request {request.request_id}: {request.input_tokens} prompt tokens exceed the token budget")
            return

        self.state.waiting_queue.append(request)
        if _invokes_at(request.prompt_index, self.mode, self.config.invocation_period):
            busy = self.cost.predictor_cost(self.mode, self.shape.num_moe_layers) if request.prompt_index > 0 else 0.0
            self.predictor_busy_until = max(self.predictor_busy_until, self.now + busy)
            if self.mode is EngineMode.EMOE_E:
                self.blocked_until = max(self.blocked_until, self.now + busy)
            self.queue.push(self.now, EventKind.PREDICTOR, prompt_index=request.prompt_index)

        self._schedule()
        self._ensure_iteration()

    def _on_predictor(self, event: ScheduledEvent) -> None:
        prompt_index = event.payload["prompt_index"]
        if prompt_index == 0:
            # First prompt: every expert is already resident
            plan_id = next(self._plan_ids)
            self.log.append(self.now, LogKind.PLAN, plan_id=plan_id, value=0.0, count=0, detail="agnostic=0;aware=0")
            return

        if self.mode is EngineMode.RANDOM:
            target = [
                frozenset(int(x) for x in self.rng.choice(self.shape.experts_per_layer, size=budget, replace=False))
                for budget in self.config.budgets
            ]
            plan = plan_loading(self.committed, target, self.cost, budgets=self.config.budgets)
            self._launch_plan(plan, self.now, plan.estimated_latency, plan.estimated_latency)
            return

        history = self.trace[(prompt_index - 1) % len(self.trace)]
        prediction, interval = invoke_predictor(
            self.predictor, history, self.config, self.cost, self.shape, self.now, prompt_index
        )
        self.log.append(self.now, LogKind.PREDICTOR, value=interval.cost, count=prompt_index, detail=self.mode.value)

        frequencies = self._blended_frequencies(prediction)
        running = list(self.state.scheduled_queue)
        incoming = list(self.state.waiting_queue)
        masked = expected_tokens(self.profiles, running, incoming, frequencies, task_aware=True)
        agnostic = expected_tokens(self.profiles, running, incoming, frequencies, task_aware=False)

        agnostic_target = select_experts(agnostic, self.shape, self.config.budgets, self.committed)
        agnostic_plan = plan_loading(
            self.committed, agnostic_target, self.cost, scores=agnostic.aggregate, budgets=self.config.budgets
        )
        aware_plan = plan_task_aware(
            self.committed, agnostic_target, masked, agnostic, self.config.budgets, self.cost
        )
        if self.config.task_aware:
            plan, self.scores = aware_plan, masked.aggregate
        else:
            plan, self.scores = agnostic_plan, agnostic.aggregate
        self._launch_plan(plan, interval.end, agnostic_plan.estimated_latency, aware_plan.estimated_latency)

    def _on_load_complete(self, event: ScheduledEvent) -> None:
        layer = event.payload["layer"]
        plan_id = event.payload["plan_id"]
        start = event.payload["start"]
        self.placement = self.placement.with_layer(layer, event.payload["resident"], event.payload["budget"])
        self.log.append(
            self.now, LogKind.LOAD_COMPLETE, layer=layer, plan_id=plan_id,
            value=start, count=event.payload["loads"],
        )
        self.log.append(self.now, LogKind.TRANSFER, layer=layer, plan_id=plan_id, value=self.now - start)
        self.log.append(
            self.now, LogKind.PLACEMENT, layer=layer, plan_id=plan_id,
            value=float(self.placement.device_bytes_used),
            detail=" ".join(str(x) for x in sorted(self.placement.resident[layer])),
        )
        self._record_memory(plan_id)

    def _on_iteration(self, event: ScheduledEvent) -> None:
        self.iteration_pending = False
        if self.in_flight:
            self._finish_iteration()
        if self.now < self.blocked_until:
            self._push_iteration(self.blocked_until)
            return
        self._start_iteration()

    # ------------------------------------------------------------------
    # Iterations
    # ------------------------------------------------------------------

    def _finish_iteration(self) -> None:
        completed = False
        for token in self.in_flight:
            request = self.requests[token.request_id]
            if token.first_token:
                request.first_token_time = self.now
                self.log.append(self.now, LogKind.FIRST_TOKEN, request_id=request.request_id)
            if token.completed:
                request.completion_time = self.now
                request.transition_to(RequestState.COMPLETED)
                self.log.append(self.now, LogKind.COMPLETE, request_id=request.request_id, count=request.generated_tokens)
                completed = True
        self.in_flight = []
        if completed:
            self.state.scheduled_queue = [r for r in self.state.scheduled_queue if r.state is not RequestState.COMPLETED]
            self._schedule()

    def _start_iteration(self) -> None:
        batch = list(self.state.scheduled_queue)
        if not batch:
            return
        for request in batch:
            if request.state is RequestState.SCHEDULED:
                request.transition_to(RequestState.RUNNING)

        contended = self.transfer_free_at > self.now or self.predictor_busy_until > self.now
        if self.mode.loads_on_demand:
            result = on_demand_step(
                batch, self.placement, self.trace, self.cost,
                pipelined=self.mode is EngineMode.PREFETCH, contended=contended,
            )
            self.placement = result.placement
            self._on_demand_transfer += result.transfer_time
            self._on_demand_iterations += 1
            self.delta_e = self._on_demand_transfer / self._on_demand_iterations
            self.log.append(self.now, LogKind.TRANSFER, value=result.transfer_time)
            self._record_memory()
        else:
            result = iteration_step(batch, self.placement, self.trace, self.cost, contended, self.scores)

        self.log.append(self.now, LogKind.ITERATION, value=result.elapsed, count=len(batch))
        self.log.append(self.now, LogKind.ROUTING, value=float(result.hits), count=result.lookups)
        self.in_flight = result.token_events
        self._push_iteration(self.now + result.elapsed)

    def _push_iteration(self, time: float) -> None:
        self.queue.push(time, EventKind.ITERATION)
        self.iteration_pending = True

    def _ensure_iteration(self) -> None:
        if not self.iteration_pending and self.state.scheduled_queue:
            self._push_iteration(max(self.now, self.blocked_until))

    # ------------------------------------------------------------------
    # Scheduling and plans
    # ------------------------------------------------------------------

    def _schedule(self) -> None:
        """
        Run one admission pass and advance the admitted requests.

        Every admission passes the token-budget, own-SLO and peer-SLO guards
        except an ``idle_override``: when the pass admits nothing and nothing
        is scheduled, the tightest-target waiting request is admitted with
        only the token budget enforced, so an idle engine always makes
        progress.
        """
        if not self.state.waiting_queue:
            return
        for request in self.state.waiting_queue:
            request.runtime_so_far = self.now - request.arrival_time
        new_state, decisions = schedule_with_decisions(self.state, self.delta_e, self.cost.per_token_cost, self.now)
        override = None
        if not new_state.scheduled_queue and new_state.waiting_queue:
            override = min(new_state.waiting_queue, key=slo_order_key)
            new_state = force_admit(new_state, override)

        # The scheduler works on copies; carry its outcome over to our requests
        previously_scheduled = {r.request_id for r in self.state.scheduled_queue}
        for queued in new_state.scheduled_queue:
            if queued.request_id not in previously_scheduled:
                self.requests[queued.request_id].transition_to(RequestState.SCHEDULED)
        self.state = SchedulerState(
            [self.requests[r.request_id] for r in new_state.waiting_queue],
            [self.requests[r.request_id] for r in new_state.scheduled_queue],
            new_state.token_budget,
        )

        for decision in decisions:
            if override is not None and decision.request_id == override.request_id:
                reason, admitted = ScheduleReason.IDLE_OVERRIDE, True
            else:
                reason, admitted = decision.reason, decision.admitted
            self.log.append(
                self.now, LogKind.DECISION, request_id=decision.request_id,
                count=int(admitted), detail=reason.value,
            )

    def _blended_frequencies(self, prediction: Prediction) -> Dict[str, np.ndarray]:
        blend = self.config.prediction_blend
        predicted = normalize_rows(prediction.scores)
        return {
            profile.task_id: normalize_rows(
                blend * predicted + (1.0 - blend) * self.predictor.task_frequencies(profile.task_id)
            )
            for profile in self.profiles
        }

    def _launch_plan(self, plan: LoadingPlan, ready: float, agnostic_delta: float, aware_delta: float) -> None:
        """Commit a plan and queue its per-layer load completions."""
        plan_id = next(self._plan_ids)
        before = self.committed
        self.committed = plan.apply(before)
        self.delta_e = plan.estimated_latency
        self.log.append(
            self.now, LogKind.PLAN, plan_id=plan_id, value=plan.estimated_latency, count=plan.total_loads,
            detail=f"agnostic={_fmt(agnostic_delta)};aware={_fmt(aware_delta)}",
        )

        start = max(ready, self.transfer_free_at)
        windows = plan.layer_windows(start)
        for layer, window_start, window_end in windows:
            self.queue.push(
                window_end, EventKind.LOAD_COMPLETE,
                plan_id=plan_id, layer=layer, start=window_start,
                resident=self.committed.resident[layer], budget=plan.budgets[layer],
                loads=len(plan.layers[layer].loads),
            )
        if windows:
            self.transfer_free_at = windows[-1][2]

    def _record_memory(self, plan_id: Optional[int] = None) -> None:
        self.log.append(
            self.now, LogKind.MEMORY, plan_id=plan_id,
            value=float(self.placement.device_bytes_used), count=self.placement.expert_bytes_used,
        )


def run(scenario: SimulationInput) -> Metrics:
    """
    Simulate a scenario.

    Raises:
        ScenarioValidationError: The scenario is inconsistent; raised before
            any event executes
    """
    return Simulator(scenario).run()
