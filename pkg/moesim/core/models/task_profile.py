"""
Task profile models for moesim.

A task profile captures what the serving system knows about a task type
ahead of time: how to recognise it, how long its prompts and generations
tend to be, its latency target, which MoE layers are sensitive to routing
accuracy and how its tokens spread over experts.

Classes:
    LengthDistribution: Token-length distribution described by mean and p90
    TaskProfile: Per-task profile used by the workload, loader and scheduler
"""

from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from moesim.core.constants import MAX_INPUT_TOKENS, MAX_OUTPUT_TOKENS, PROBABILITY_TOLERANCE
from moesim.utils.error_utils import ScenarioValidationError
from moesim.utils.stats_utils import lognormal_params


@dataclass(frozen=True)
class LengthDistribution:
    """
    Long-tailed token-length distribution.

    Only the log-normal family is supported; it is parameterised by its mean
    and 90th percentile so profiles can be written from observed CDFs.
    """

    mean: float
    p90: float
    family: str = "lognormal"

    def __post_init__(self):
        if self.family != "lognormal":
            raise ScenarioValidationError(f"unsupported length family '{self.family}'")
        # Raises when no log-normal matches the statistics
        lognormal_params(self.mean, self.p90)

    @property
    def params(self) -> Tuple[float, float]:
        return lognormal_params(self.mean, self.p90)

    def sample(self, rng: np.random.Generator, size: int, max_tokens: int = MAX_OUTPUT_TOKENS) -> np.ndarray:
        """Draw integer lengths in [1, max_tokens]."""
        mu, sigma = self.params
        raw = rng.lognormal(mean=mu, sigma=sigma, size=size)
        return np.clip(np.ceil(raw), 1, max_tokens).astype(np.int64)

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "mean": self.mean, "p90": self.p90}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LengthDistribution":
        return cls(mean=float(data["mean"]), p90=float(data["p90"]), family=data.get("family", "lognormal"))


@dataclass(eq=False)
class TaskProfile:
    """
    Profile of one task type.

    Attributes:
        task_id: Identifier referenced by requests and configs
        name: Human readable label
        keywords: Lowercase keywords searched for in prompt text
        output_length_dist: Distribution of generated tokens
        input_length_dist: Distribution of prompt tokens
        expected_output_tokens: Expected generated tokens (W_o)
        slo_ttft: Latency target in seconds
        sensitivity: Length-m vector of 0/1; 0 marks a layer whose routing
            accuracy does not matter for this task
        routing_prior: (m, E) per-layer expert frequency rows
    """

    task_id: str
    name: str
    keywords: Tuple[str, ...]
    output_length_dist: LengthDistribution
    input_length_dist: LengthDistribution
    expected_output_tokens: float
    slo_ttft: float
    sensitivity: np.ndarray
    routing_prior: np.ndarray

    def __post_init__(self):
        self.keywords = tuple(str(k).strip().lower() for k in self.keywords if str(k).strip())
        if not self.keywords:
            raise ScenarioValidationError(f"task '{self.task_id}': keywords must be non-empty")
        if self.expected_output_tokens <= 0:
            raise ScenarioValidationError(f"task '{self.task_id}': expected_output_tokens must be positive")
        if self.slo_ttft <= 0:
            raise ScenarioValidationError(f"task '{self.task_id}': slo_ttft must be positive")

        self.sensitivity = np.asarray(self.sensitivity, dtype=np.int64)
        if self.sensitivity.ndim != 1 or not np.isin(self.sensitivity, (0, 1)).all():
            raise ScenarioValidationError(f"task '{self.task_id}': sensitivity must be a vector of 0/1")

        self.routing_prior = np.asarray(self.routing_prior, dtype=float)
        if self.routing_prior.ndim != 2 or self.routing_prior.shape[0] != self.sensitivity.shape[0]:
            raise ScenarioValidationError(
                f"task '{self.task_id}': routing_prior must have one row per layer "
                f"({self.sensitivity.shape[0]}), got shape {self.routing_prior.shape}"
            )
        if np.any(self.routing_prior < 0):
            raise ScenarioValidationError(f"task '{self.task_id}': routing_prior must be non-negative")
        if np.any(np.abs(self.routing_prior.sum(axis=1) - 1.0) > PROBABILITY_TOLERANCE):
            raise ScenarioValidationError(f"task '{self.task_id}': routing_prior rows must sum to 1")

    @property
    def num_layers(self) -> int:
        return int(self.sensitivity.shape[0])

    @property
    def insensitive_layers(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.sensitivity == 0))

    def sample_input_tokens(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.input_length_dist.sample(rng, size, max_tokens=MAX_INPUT_TOKENS)

    def sample_output_tokens(self, rng: np.random.Generator, size: int, max_tokens: int = MAX_OUTPUT_TOKENS) -> np.ndarray:
        return self.output_length_dist.sample(rng, size, max_tokens=max_tokens)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "keywords": list(self.keywords),
            "output_length": self.output_length_dist.to_dict(),
            "input_length": self.input_length_dist.to_dict(),
            "expected_output_tokens": self.expected_output_tokens,
            "slo_ttft": self.slo_ttft,
            "sensitivity": self.sensitivity.tolist(),
            "routing_prior": self.routing_prior.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskProfile":
        return cls(
            task_id=data["task_id"],
            name=data.get("name", data["task_id"]),
            keywords=tuple(data["keywords"]),
            output_length_dist=LengthDistribution.from_dict(data["output_length"]),
            input_length_dist=LengthDistribution.from_dict(data["input_length"]),
            expected_output_tokens=float(data["expected_output_tokens"]),
            slo_ttft=float(data["slo_ttft"]),
            sensitivity=np.asarray(data["sensitivity"]),
            routing_prior=np.asarray(data["routing_prior"]),
        )


def profiles_by_id(profiles: Sequence[TaskProfile]) -> Dict[str, TaskProfile]:
    """Index profiles by task_id, rejecting duplicates."""
    index: Dict[str, TaskProfile] = {}
    for profile in profiles:
        if profile.task_id in index:
            raise ScenarioValidationError(f"duplicate task_id '{profile.task_id}'")
        index[profile.task_id] = profile
    return index
