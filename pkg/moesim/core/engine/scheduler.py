"""
SLO-aware request scheduler for moesim.

Greedy admission control: waiting requests are visited from the tightest
latency target to the loosest and admitted when they fit the token budget,
their own expected latency meets their target and no already-scheduled
request that currently meets its target would stop meeting it.

Classes:
    LatencyEstimate: Components of a request's expected latency
    SchedulerState: Waiting and scheduled queues under a token budget
    ScheduleDecision: One admission decision with its reason code

Functions:
    expected_latency, schedule, schedule_with_decisions,
    update_generation_estimate
"""

import copy
import math
from dataclasses import dataclass, field
from typing import List, Tuple

from moesim.core.constants import GEN_RESET_FRACTION, RequestState, ScheduleReason
from moesim.core.models.request import Request
from moesim.utils.error_utils import InvalidTransitionError, ScenarioValidationError


@dataclass(frozen=True)
class LatencyEstimate:
    """
    t = expert_loading + compute_term + runtime_so_far.

    Attributes:
        expert_loading: Delta E in seconds
        compute_term: (W + n * G) * c in seconds
        runtime_so_far: r in seconds
        total: Expected latency t in seconds
        per_token_cost: c in seconds per token
        rank_ahead: n, scheduled requests expected to finish after this one
    """

    expert_loading: float
    compute_term: float
    runtime_so_far: float
    total: float
    per_token_cost: float
    rank_ahead: int


@dataclass
class SchedulerState:
    """
    Queues of the scheduler.

    ``scheduled_queue`` holds every admitted request that has not completed,
    whether or not it has started running.
    """

    waiting_queue: List[Request] = field(default_factory=list)
    scheduled_queue: List[Request] = field(default_factory=list)
    token_budget: int = 4096

    def __post_init__(self):
        if self.token_budget < 1:
            raise ScenarioValidationError(f"token_budget must be >= 1, got {self.token_budget}")

    @property
    def current_scheduled_tokens(self) -> int:
        return sum(r.input_tokens for r in self.scheduled_queue)


@dataclass(frozen=True)
class ScheduleDecision:
    """Outcome for one waiting request in one scheduling call."""

    time: float
    request_id: int
    admitted: bool
    reason: ScheduleReason


def slo_order_key(request: Request) -> Tuple[float, float, int]:
    """Tightest latency target first; arrival then id break ties."""
    return (request.slo_ttft, request.arrival_time, request.request_id)


def expected_latency(
    request: Request,
    state: SchedulerState,
    delta_e: float,
    c: float,
    new_tokens: int = 0,
) -> LatencyEstimate:
    """
    Expected latency t = Delta E + (W + n * G) * c + r.

    n counts the other scheduled requests whose remaining generation
    estimate is at least this request's (ties count as finishing after it).
    ``new_tokens`` adds prompt tokens of requests admitted alongside it.

    Examples:
        Delta E=0.5, W=128, n=2, G=100, c=0.001, r=1.0 gives 1.828
    """
    if c <= 0:
        raise ScenarioValidationError(f"per-token cost must be positive, got {c}")
    rank_ahead = sum(
        1
        for other in state.scheduled_queue
        if other.request_id != request.request_id
        and other.remaining_gen_estimate >= request.remaining_gen_estimate
    )
    tokens = request.input_tokens + new_tokens + rank_ahead * request.remaining_gen_estimate
    compute = tokens * c
    return LatencyEstimate(
        expert_loading=delta_e,
        compute_term=compute,
        runtime_so_far=request.runtime_so_far,
        total=delta_e + compute + request.runtime_so_far,
        per_token_cost=c,
        rank_ahead=rank_ahead,
    )


def _scheduled_copy(request: Request) -> Request:
    admitted = copy.copy(request)
    admitted.transition_to(RequestState.SCHEDULED)
    return admitted


def _peers_stay_within_slo(
    candidate: Request,
    scheduled: List[Request],
    token_budget: int,
    delta_e: float,
    c: float,
    pending_tokens: int,
) -> bool:
    before = SchedulerState([], scheduled, token_budget)
    after = SchedulerState([], scheduled + [candidate], token_budget)
    for peer in scheduled:
        if expected_latency(peer, before, delta_e, c, pending_tokens).total >= peer.slo_ttft:
            continue  # already missing its target
        new = expected_latency(peer, after, delta_e, c, pending_tokens + candidate.input_tokens)
        if not new.total < peer.slo_ttft:
            return False
    return True


def schedule_with_decisions(
    state: SchedulerState,
    delta_e: float,
    c: float,
    now: float = 0.0,
) -> Tuple[SchedulerState, List[ScheduleDecision]]:
    """
    Run one greedy admission pass.

    Args:
        state: Current queues (not modified; admitted requests are copied
            before their state advances)
        delta_e: Profiled expert loading latency
        c: Profiled per-token cost
        now: Timestamp recorded on decisions

    Returns:
        Tuple (new state, one decision per waiting request in visiting order)
    """
    scheduled = list(state.scheduled_queue)
    used = sum(r.input_tokens for r in scheduled)
    pending = 0
    still_waiting: List[Request] = []
    decisions: List[ScheduleDecision] = []

    for request in sorted(state.waiting_queue, key=slo_order_key):
        if not request.input_tokens + used < state.token_budget:
            reason = ScheduleReason.OVER_BUDGET
        elif not expected_latency(
            request, SchedulerState([], scheduled, state.token_budget), delta_e, c, pending
        ).total < request.slo_ttft:
            reason = ScheduleReason.OWN_SLO
        elif not _peers_stay_within_slo(request, scheduled, state.token_budget, delta_e, c, pending):
            reason = ScheduleReason.PEER_SLO
        else:
            reason = ScheduleReason.ADMITTED

        if reason is ScheduleReason.ADMITTED:
            scheduled.append(_scheduled_copy(request))
            used += request.input_tokens
            pending += request.input_tokens
        else:
            still_waiting.append(request)
        decisions.append(ScheduleDecision(now, request.request_id, reason is ScheduleReason.ADMITTED, reason))

    # Keep the original arrival order of the requests left waiting
    remaining_ids = {r.request_id for r in still_waiting}
    waiting = [r for r in state.waiting_queue if r.request_id in remaining_ids]
    return SchedulerState(waiting, scheduled, state.token_budget), decisions


def schedule(state: SchedulerState, delta_e: float, c: float) -> SchedulerState:
    """Greedy admission pass; see ``schedule_with_decisions``."""
    new_state, _ = schedule_with_decisions(state, delta_e, c)
    return new_state


def force_admit(state: SchedulerState, request: Request) -> SchedulerState:
    """
    Admit ``request`` regardless of latency guards (budget still enforced).

    Like ``schedule_with_decisions`` it leaves the caller's request untouched
    and queues a scheduled copy.
    """
    if not request.input_tokens + state.current_scheduled_tokens < state.token_budget:
        raise ScenarioValidationError(f"request {request.request_id} does not fit the token budget")
    waiting = [r for r in state.waiting_queue if r.request_id != request.request_id]
    return SchedulerState(waiting, state.scheduled_queue + [_scheduled_copy(request)], state.token_budget)


def update_generation_estimate(request: Request) -> Request:
    """
    Account for one generated token.

    The estimate drops by one; when it reaches zero while the request is
    still generating, it is reset to ceil(5% of the initial estimate).
    The caller records the token in ``generated_tokens`` first.
    """
    if request.state is not RequestState.RUNNING:
        raise InvalidTransitionError(
            f"request {request.request_id}: generation estimate updated while {request.state.value}"
        )
    request.remaining_gen_estimate = max(0, request.remaining_gen_estimate - 1)
    if request.remaining_gen_estimate == 0 and not request.is_complete:
        request.remaining_gen_estimate = max(1, math.ceil(round(GEN_RESET_FRACTION * request.initial_gen_estimate, 9)))
    return request
