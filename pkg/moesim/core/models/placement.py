"""
Expert placement models for moesim.

Classes:
    Placement: Device-resident experts per layer under per-layer budgets
    ExpectedTokens3D: Expected tokens per task, layer and expert
    LayerPlan: Evictions and loads of one layer
    LoadingPlan: Ordered per-layer transfer plan with its latency estimate
"""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from moesim.core.constants import LoadOp
from moesim.core.models.model_shape import ModelShape
from moesim.utils.error_utils import ScenarioValidationError


@dataclass(frozen=True)
class Placement:
    """
    Immutable snapshot of which experts are on the device.

    Attributes:
        shape: Model geometry
        resident: One frozenset of expert indices per layer
        budgets: Per-layer budget L
    """

    shape: ModelShape
    resident: Tuple[FrozenSet[int], ...]
    budgets: Tuple[int, ...]

    def __post_init__(self):
        m, e = self.shape.num_moe_layers, self.shape.experts_per_layer
        if len(self.resident) != m or len(self.budgets) != m:
            raise ScenarioValidationError(f"placement needs {m} layers, got {len(self.resident)}/{len(self.budgets)}")
        for layer, (experts, budget) in enumerate(zip(self.resident, self.budgets)):
            if not 0 <= budget <= e:
                raise ScenarioValidationError(f"layer {layer}: budget {budget} outside [0, {e}]")
            if len(experts) > budget:
                raise ScenarioValidationError(f"layer {layer}: {len(experts)} resident experts exceed budget {budget}")
            if any(not 0 <= x < e for x in experts):
                raise ScenarioValidationError(f"layer {layer}: expert index out of range [0, {e})")

    @classmethod
    def full(cls, shape: ModelShape) -> "Placement":
        """Every expert resident, budget E everywhere."""
        everything = frozenset(range(shape.experts_per_layer))
        return cls(
            shape=shape,
            resident=tuple(everything for _ in range(shape.num_moe_layers)),
            budgets=tuple(shape.experts_per_layer for _ in range(shape.num_moe_layers)),
        )

    @classmethod
    def from_sets(cls, shape: ModelShape, sets: Sequence[Iterable[int]], budgets: Optional[Sequence[int]] = None) -> "Placement":
        resident = tuple(frozenset(int(x) for x in s) for s in sets)
        if budgets is None:
            budgets = tuple(len(s) for s in resident)
        return cls(shape=shape, resident=resident, budgets=tuple(int(b) for b in budgets))

    @property
    def resident_counts(self) -> Tuple[int, ...]:
        return tuple(len(s) for s in self.resident)

    @property
    def expert_bytes_used(self) -> int:
        return sum(self.resident_counts) * self.shape.expert_bytes

    @property
    def device_bytes_used(self) -> int:
        return self.shape.device_bytes(self.resident_counts)

    def resident_mask(self) -> np.ndarray:
        """(m, E) boolean residency mask."""
        mask = np.zeros((self.shape.num_moe_layers, self.shape.experts_per_layer), dtype=bool)
        for layer, experts in enumerate(self.resident):
            if experts:
                mask[layer, sorted(experts)] = True
        return mask

    def with_layer(self, layer: int, experts: Iterable[int], budget: Optional[int] = None) -> "Placement":
        """Copy with one layer's resident set (and optionally budget) replaced."""
        resident = list(self.resident)
        budgets = list(self.budgets)
        resident[layer] = frozenset(int(x) for x in experts)
        if budget is not None:
            budgets[layer] = int(budget)
        return Placement(shape=self.shape, resident=tuple(resident), budgets=tuple(budgets))

    def to_records(self, time: float, plan_id: Optional[int] = None) -> List[Dict]:
        """Snapshot rows (time, plan_id, layer, resident, device_bytes)."""
        device_bytes = self.device_bytes_used
        return [
            {
                "time": time,
                "plan_id": plan_id,
                "layer": layer,
                "resident": sorted(experts),
                "device_bytes": device_bytes,
            }
            for layer, experts in enumerate(self.resident)
        ]


@dataclass(eq=False)
class ExpectedTokens3D:
    """
    Expected tokens routed to each expert.

    Attributes:
        task_ids: Task order of the first axis
        per_task: Array of shape (tasks, m, E)
    """

    task_ids: Tuple[str, ...]
    per_task: np.ndarray

    def __post_init__(self):
        self.per_task = np.asarray(self.per_task, dtype=float)
        if self.per_task.ndim != 3 or self.per_task.shape[0] != len(self.task_ids):
            raise ScenarioValidationError(
                f"per_task must have shape (tasks={len(self.task_ids)}, m, E), got {self.per_task.shape}"
            )
        if np.any(self.per_task < 0):
            raise ScenarioValidationError("expected tokens must be non-negative")

    @property
    def aggregate(self) -> np.ndarray:
        """(m, E) sum over task types."""
        return self.per_task.sum(axis=0)

    def for_task(self, task_id: str) -> np.ndarray:
        return self.per_task[self.task_ids.index(task_id)]


@dataclass(frozen=True)
class LayerPlan:
    """Evictions and loads of one layer; loads are in transfer order."""

    layer: int
    evictions: Tuple[int, ...]
    loads: Tuple[int, ...]

    @property
    def ops(self) -> List[Tuple[LoadOp, int]]:
        # Evictions first so the budget holds at every intermediate step
        return [(LoadOp.EVICT, e) for e in self.evictions] + [(LoadOp.LOAD, e) for e in self.loads]

    @property
    def is_empty(self) -> bool:
        return not self.evictions and not self.loads


@dataclass(frozen=True)
class LoadingPlan:
    """
    Transfer plan from one placement to another.

    Attributes:
        layers: Per-layer plans in ascending layer order
        per_expert_transfer: Seconds to move one expert host -> device
        budgets: Per-layer budgets of the resulting placement
        estimated_latency: Delta E, the sequential sum of per-layer load windows
    """

    layers: Tuple[LayerPlan, ...]
    per_expert_transfer: float
    budgets: Tuple[int, ...]
    estimated_latency: float = field(init=False)

    def __post_init__(self):
        total = 0.0
        for layer_plan in self.layers:
            total += len(layer_plan.loads) * self.per_expert_transfer
        object.__setattr__(self, "estimated_latency", total)

    @property
    def is_empty(self) -> bool:
        return all(lp.is_empty for lp in self.layers)

    @property
    def total_loads(self) -> int:
        return sum(len(lp.loads) for lp in self.layers)

    def layer_windows(self, start: float) -> List[Tuple[int, float, float]]:
        """
        (layer, load_start, load_complete) for every layer with work.

        Layer l+1 starts only once layer l has completed.
        """
        windows = []
        cursor = start
        for layer_plan in self.layers:
            if layer_plan.is_empty:
                continue
            end = cursor + len(layer_plan.loads) * self.per_expert_transfer
            windows.append((layer_plan.layer, cursor, end))
            cursor = end
        return windows

    def layer_result(self, placement: Placement, layer: int) -> FrozenSet[int]:
        """Resident set of ``layer`` once this plan's ops for it are applied."""
        layer_plan = self.layers[layer]
        current = set(placement.resident[layer])
        current.difference_update(layer_plan.evictions)
        current.update(layer_plan.loads)
        return frozenset(current)

    def apply_layer(self, placement: Placement, layer: int) -> Placement:
        return placement.with_layer(layer, self.layer_result(placement, layer), budget=self.budgets[layer])

    def apply(self, placement: Placement) -> Placement:
        """Apply every layer in ascending order."""
        result = placement
        for layer_plan in self.layers:
            result = self.apply_layer(result, layer_plan.layer)
        return result
