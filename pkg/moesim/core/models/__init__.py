"""
moesim Core Models Package.

Value types shared by the engines: model geometry, task profiles, requests,
routing traces, placements and loading plans, and the cost model.

Modules:
    model_shape: ModelShape
    task_profile: LengthDistribution, TaskProfile
    request: Request
    routing_trace: RoutingTrace, TraceCalibration
    placement: Placement, ExpectedTokens3D, LayerPlan, LoadingPlan
    cost_model: CostModel, EngineConfig
"""

from moesim.core.models.model_shape import ModelShape

from moesim.core.models.task_profile import (
    LengthDistribution,
    TaskProfile,
    profiles_by_id,
)

from moesim.core.models.request import Request

from moesim.core.models.routing_trace import (
    RoutingTrace,
    TraceCalibration,
)

from moesim.core.models.placement import (
    Placement,
    ExpectedTokens3D,
    LayerPlan,
    LoadingPlan,
)

from moesim.core.models.cost_model import (
    CostModel,
    EngineConfig,
    budgets_from_fraction,
)

__all__ = [
    # Geometry and tasks
    "ModelShape",
    "LengthDistribution",
    "TaskProfile",
    "profiles_by_id",
    # Requests and routing
    "Request",
    "RoutingTrace",
    "TraceCalibration",
    # Placement
    "Placement",
    "ExpectedTokens3D",
    "LayerPlan",
    "LoadingPlan",
    # Costs and settings
    "CostModel",
    "EngineConfig",
    "budgets_from_fraction",
]

__version__ = "1.0.0"
__author__ = "moesim Development Team"
