"""
Routing trace models for moesim.

Classes:
    RoutingTrace: Ground-truth gate decisions per prompt, layer and token
    TraceCalibration: Transition matrices that drive the trace generator
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np

from moesim.core.constants import DEFAULT_TOKEN_DISPERSION
from moesim.core.models.model_shape import ModelShape
from moesim.utils.error_utils import ScenarioValidationError
from moesim.utils.stats_utils import check_stochastic


class RoutingTrace:
    """
    Per-prompt expert routing.

    Each prompt is an integer array of shape (m, tokens, k); entry
    ``[layer, token, rank]`` is the expert the gate ranked at ``rank`` for
    that token, rank 0 being the gate's top choice.

    Attributes:
        prompts: List of (m, tokens, k) arrays
        num_experts: Experts per layer (E)
        task_ids: Optional task label per prompt
    """

    def __init__(self, prompts: Sequence[np.ndarray], num_experts: int, task_ids: Optional[Sequence[str]] = None):
        self.prompts: List[np.ndarray] = [np.asarray(p, dtype=np.int64) for p in prompts]
        self.num_experts = int(num_experts)
        self.task_ids = list(task_ids) if task_ids is not None else None
        if self.task_ids is not None and len(self.task_ids) != len(self.prompts):
            raise ScenarioValidationError(
                f"task_ids has {len(self.task_ids)} entries for {len(self.prompts)} prompts"
            )
        self._dominant_cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.prompts[index]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.prompts)

    @property
    def num_layers(self) -> int:
        return int(self.prompts[0].shape[0]) if self.prompts else 0

    @property
    def top_k(self) -> int:
        return int(self.prompts[0].shape[2]) if self.prompts else 0

    def task_of(self, index: int) -> Optional[str]:
        return self.task_ids[index] if self.task_ids is not None else None

    def top1(self, index: int) -> np.ndarray:
        """(m, tokens) array of rank-0 choices."""
        return self.prompts[index][:, :, 0]

    def dominant_experts(self, index: int) -> np.ndarray:
        """
        Most frequent rank-0 expert per layer of one prompt.

        Ties resolve to the lowest expert index.
        """
        cached = self._dominant_cache.get(index)
        if cached is None:
            top1 = self.top1(index)
            m = top1.shape[0]
            offsets = np.arange(m)[:, None] * self.num_experts
            counts = np.bincount((top1 + offsets).ravel(), minlength=m * self.num_experts)
            cached = counts.reshape(m, self.num_experts).argmax(axis=1)
            self._dominant_cache[index] = cached
        return cached

    def validate(self, shape: ModelShape) -> None:
        """Check bounds and top-k distinctness of every token against a model shape."""
        for n, routing in enumerate(self.prompts):
            if routing.ndim != 3 or routing.shape[0] != shape.num_moe_layers or routing.shape[2] != shape.top_k:
                raise ScenarioValidationError(
                    f"prompt {n}: expected shape (m={shape.num_moe_layers}, tokens, k={shape.top_k}), "
                    f"got {routing.shape}"
                )
            if routing.size and (routing.min() < 0 or routing.max() >= shape.experts_per_layer):
                raise ScenarioValidationError(f"prompt {n}: expert index out of range [0, {shape.experts_per_layer})")
            if shape.top_k > 1 and routing.size:
                ordered = np.sort(routing, axis=2)
                if np.any(np.diff(ordered, axis=2) == 0):
                    raise ScenarioValidationError(f"prompt {n}: duplicate expert within a token's top-k")

    def to_records(self) -> List[Dict[str, Any]]:
        """One record per prompt, suitable for JSON lines."""
        return [
            {
                "prompt_index": n,
                "task_id": self.task_of(n),
                "routing": routing.tolist(),
            }
            for n, routing in enumerate(self.prompts)
        ]

    @classmethod
    def from_records(cls, records: Sequence[Dict[str, Any]], num_experts: int) -> "RoutingTrace":
        ordered = sorted(records, key=lambda r: int(r["prompt_index"]))
        task_ids = [r.get("task_id") for r in ordered]
        return cls(
            prompts=[np.asarray(r["routing"], dtype=np.int64) for r in ordered],
            num_experts=num_experts,
            task_ids=task_ids if any(t is not None for t in task_ids) else None,
        )


@dataclass(eq=False)
class TraceCalibration:
    """
    Statistical structure of generated routing traces.

    Attributes:
        layer_transition: (m-1, E, E) row-stochastic, layer i -> i+1 top-1 expert
        prompt_transition: (m, E, E) row-stochastic, previous prompt's dominant
            expert -> this prompt's seed expert. The generator samples the
            entry-layer matrix; deeper layers follow the layer chain
        target_layer_corr: Layer-to-layer correlation the matrices were tuned for
        target_prompt_corr: Prompt-to-prompt correlation the matrices were tuned for
        rng_seed: Seed of the generator's random stream
        token_dispersion: Weight of the spread-out component in each token's
            entry-layer routing distribution; 0 routes every token to the seed
        measured_layer_corr: Layer correlation of the final calibration sample
        measured_prompt_corr: Prompt correlation of the final calibration sample
        initial_experts: Length-m dominant experts assumed before prompt 0
            (defaults to layer index mod E); the generator reads entry 0
    """

    layer_transition: np.ndarray
    prompt_transition: np.ndarray
    target_layer_corr: float = 0.0
    target_prompt_corr: float = 0.0
    rng_seed: int = 0
    token_dispersion: float = DEFAULT_TOKEN_DISPERSION
    initial_experts: Optional[np.ndarray] = field(default=None)
    measured_layer_corr: Optional[float] = None
    measured_prompt_corr: Optional[float] = None

    def __post_init__(self):
        self.layer_transition = np.asarray(self.layer_transition, dtype=float)
        self.prompt_transition = np.asarray(self.prompt_transition, dtype=float)
        if self.initial_experts is not None:
            self.initial_experts = np.asarray(self.initial_experts, dtype=np.int64)
        for name in ("target_layer_corr", "target_prompt_corr"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ScenarioValidationError(f"{name} must be in [-1, 1], got {value}")
        if not 0.0 <= self.token_dispersion <= 1.0:
            raise ScenarioValidationError(f"token_dispersion must be in [0, 1], got {self.token_dispersion}")

    def validate(self, shape: ModelShape) -> None:
        """Check that every matrix conforms to the model shape and is row-stochastic."""
        m, e = shape.num_moe_layers, shape.experts_per_layer
        if self.layer_transition.shape != (m - 1, e, e):
            raise ScenarioValidationError(
                f"layer_transition must have shape {(m - 1, e, e)}, got {self.layer_transition.shape}"
            )
        if self.prompt_transition.shape != (m, e, e):
            raise ScenarioValidationError(
                f"prompt_transition must have shape {(m, e, e)}, got {self.prompt_transition.shape}"
            )
        if m > 1:
            check_stochastic(self.layer_transition, "layer_transition")
        check_stochastic(self.prompt_transition, "prompt_transition")
        if self.initial_experts is not None:
            if self.initial_experts.shape != (m,):
                raise ScenarioValidationError(f"initial_experts must have length {m}")
            if self.initial_experts.min() < 0 or self.initial_experts.max() >= e:
                raise ScenarioValidationError(f"initial_experts must be in [0, {e})")

    def starting_experts(self, shape: ModelShape) -> np.ndarray:
        if self.initial_experts is not None:
            return self.initial_experts.copy()
        return np.arange(shape.num_moe_layers) % shape.experts_per_layer

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer_transition": self.layer_transition.tolist(),
            "prompt_transition": self.prompt_transition.tolist(),
            "target_layer_corr": self.target_layer_corr,
            "target_prompt_corr": self.target_prompt_corr,
            "rng_seed": self.rng_seed,
            "token_dispersion": self.token_dispersion,
            "initial_experts": None if self.initial_experts is None else self.initial_experts.tolist(),
            "measured_layer_corr": self.measured_layer_corr,
            "measured_prompt_corr": self.measured_prompt_corr,
        }
