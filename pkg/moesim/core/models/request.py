"""
Inference request model for moesim.

Classes:
    Request: One inference request with its runtime bookkeeping
"""

from typing import Any, Dict, Optional

from moesim.core.constants import RequestState
from moesim.utils.error_utils import InvalidTransitionError, ScenarioValidationError


class Request:
    """
    One inference request.

    The scheduler only sees ``remaining_gen_estimate``; the true generation
    length ``output_tokens`` is hidden from it and only decides when the
    simulator completes the request.

    Attributes:
        request_id: Unique identifier (also the arrival order)
        arrival_time: Arrival timestamp in seconds
        task_id: Task type of the request
        input_tokens: Prompt tokens (W)
        slo_ttft: Latency target in seconds
        remaining_gen_estimate: Estimated tokens still to generate (G)
        initial_gen_estimate: Estimate at arrival
        output_tokens: True number of tokens the request generates
        runtime_so_far: Seconds spent in the system so far (r)
        state: Lifecycle state
        prompt_index: Row of the routing trace this request replays
        generated_tokens: Tokens generated so far
    """

    def __init__(
        self,
        request_id: int,
        arrival_time: float,
        task_id: str,
        input_tokens: int,
        slo_ttft: float,
        remaining_gen_estimate: int,
        initial_gen_estimate: Optional[int] = None,
        output_tokens: Optional[int] = None,
        runtime_so_far: float = 0.0,
        state: RequestState = RequestState.WAITING,
        prompt_index: Optional[int] = None,
        generated_tokens: int = 0,
    ):
        if input_tokens < 1:
            raise ScenarioValidationError(f"request {request_id}: input_tokens must be >= 1")
        if remaining_gen_estimate < 0:
            raise ScenarioValidationError(f"request {request_id}: remaining_gen_estimate must be >= 0")
        if runtime_so_far < 0:
            raise ScenarioValidationError(f"request {request_id}: runtime_so_far must be >= 0")

        self.request_id = int(request_id)
        self.arrival_time = float(arrival_time)
        self.task_id = task_id
        self.input_tokens = int(input_tokens)
        self.slo_ttft = float(slo_ttft)
        self.remaining_gen_estimate = int(remaining_gen_estimate)
        self.initial_gen_estimate = int(
            initial_gen_estimate if initial_gen_estimate is not None else remaining_gen_estimate
        )
        self.output_tokens = int(output_tokens if output_tokens is not None else max(1, self.initial_gen_estimate))
        self.runtime_so_far = float(runtime_so_far)
        self.state = RequestState(state)
        self.prompt_index = int(prompt_index if prompt_index is not None else request_id)
        self.generated_tokens = int(generated_tokens)

        # Filled in by the simulator
        self.first_token_time: Optional[float] = None
        self.completion_time: Optional[float] = None

    @property
    def is_complete(self) -> bool:
        return self.generated_tokens >= self.output_tokens

    @property
    def needs_prefill(self) -> bool:
        return self.generated_tokens == 0

    def transition_to(self, state: RequestState) -> None:
        """Advance the lifecycle state, rejecting skips and reversals."""
        state = RequestState(state)
        if not self.state.can_transition_to(state):
            raise InvalidTransitionError(
                f"request {self.request_id}: illegal transition {self.state.value} -> {state.value}"
            )
        self.state = state

    def to_dict(self) -> Dict[str, Any]:
        return {
            "request_id": self.request_id,
            "arrival_time": self.arrival_time,
            "task_id": self.task_id,
            "input_tokens": self.input_tokens,
            "slo_ttft": self.slo_ttft,
            "remaining_gen_estimate": self.remaining_gen_estimate,
            "initial_gen_estimate": self.initial_gen_estimate,
            "output_tokens": self.output_tokens,
            "runtime_so_far": self.runtime_so_far,
            "state": self.state.value,
            "prompt_index": self.prompt_index,
            "generated_tokens": self.generated_tokens,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Request":
        return cls(
            request_id=data["request_id"],
            arrival_time=data["arrival_time"],
            task_id=data["task_id"],
            input_tokens=data["input_tokens"],
            slo_ttft=data["slo_ttft"],
            remaining_gen_estimate=data["remaining_gen_estimate"],
            initial_gen_estimate=data.get("initial_gen_estimate"),
            output_tokens=data.get("output_tokens"),
            runtime_so_far=data.get("runtime_so_far", 0.0),
            state=RequestState(data.get("state", RequestState.WAITING.value)),
            prompt_index=data.get("prompt_index"),
            generated_tokens=data.get("generated_tokens", 0),
        )

    def __repr__(self) -> str:
        return (
            f"Request(id={self.request_id}, task={self.task_id}, W={self.input_tokens}, "
            f"G={self.remaining_gen_estimate}, state={self.state.value})"
        )
