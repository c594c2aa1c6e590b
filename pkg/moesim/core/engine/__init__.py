"""
moesim Core Engine Package.

Calculation engines of the simulator.

Modules:
    workload_generator: Request traces, routing traces, calibration, task typing
    predictor: Markov expert prediction
    expert_store: Expected tokens, expert selection, loading plans, routing
    scheduler: SLO-aware admission control
    simulator: Discrete-event simulation loop
    replay: Timing-free periodic reuse replay
    events, metrics: Event queue/log and derived metrics
"""

from moesim.core.engine.predictor import ExpertPredictor, MarkovExpertPredictor, TransitionModel
from moesim.core.engine.metrics import Metrics, collect_metrics
from moesim.core.engine.replay import ReplayResult, replay_hit_rate
from moesim.core.engine.scheduler import SchedulerState, schedule
from moesim.core.engine.simulator import SimulationInput, Simulator, run

__all__ = [
    "ExpertPredictor",
    "MarkovExpertPredictor",
    "TransitionModel",
    "Metrics",
    "collect_metrics",
    "ReplayResult",
    "replay_hit_rate",
    "SchedulerState",
    "schedule",
    "SimulationInput",
    "Simulator",
    "run",
]

__version__ = "1.0.0"
__author__ = "moesim Development Team"
