"""
Static geometry of a Mixture-of-Experts model.

Classes:
    ModelShape: MoE layer count, experts per layer, top-k and byte sizes
"""

from dataclasses import dataclass, asdict
from typing import Any, Dict, Sequence

from moesim.utils.error_utils import ScenarioValidationError


@dataclass(frozen=True)
class ModelShape:
    """
    Static MoE model geometry.

    Attributes:
        num_moe_layers: Number of MoE layers (m)
        experts_per_layer: Experts per MoE layer (E)
        top_k: Experts each token is routed to (k)
        expert_bytes: Weight bytes of one expert
        base_bytes: Weight bytes of everything that is not an expert
        name: Optional label used in logs and summaries
    """

    num_moe_layers: int
    experts_per_layer: int
    top_k: int
    expert_bytes: int
    base_bytes: int = 0
    name: str = ""

    def __post_init__(self):
        if self.num_moe_layers < 1:
            raise ScenarioValidationError(f"num_moe_layers must be >= 1, got {self.num_moe_layers}")
        if not 1 <= self.top_k <= self.experts_per_layer:
            raise ScenarioValidationError(
                f"need experts_per_layer >= top_k >= 1, got E={self.experts_per_layer}, k={self.top_k}"
            )
        if self.expert_bytes <= 0:
            raise ScenarioValidationError(f"expert_bytes must be positive, got {self.expert_bytes}")
        if self.base_bytes < 0:
            raise ScenarioValidationError(f"base_bytes must be non-negative, got {self.base_bytes}")

    @property
    def total_experts(self) -> int:
        return self.num_moe_layers * self.experts_per_layer

    @property
    def full_expert_bytes(self) -> int:
        """Expert bytes with every expert of every layer resident."""
        return self.total_experts * self.expert_bytes

    @property
    def full_model_bytes(self) -> int:
        return self.base_bytes + self.full_expert_bytes

    def device_bytes(self, resident_counts: Sequence[int]) -> int:
        """Exact device bytes for the given number of resident experts per layer."""
        return self.base_bytes + int(sum(int(c) for c in resident_counts)) * self.expert_bytes

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelShape":
        return cls(
            num_moe_layers=int(data["num_moe_layers"]),
            experts_per_layer=int(data["experts_per_layer"]),
            top_k=int(data["top_k"]),
            expert_bytes=int(data["expert_bytes"]),
            base_bytes=int(data.get("base_bytes", 0)),
            name=data.get("name", ""),
        )
