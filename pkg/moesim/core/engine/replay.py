"""
Timing-free replay of periodic expert reuse.

Walks a routing trace prompt by prompt, re-predicting the resident experts
every ``period`` prompts and reusing them in between, and reports how often
each token's top gate choice was resident. Used to study how the
invocation period trades prediction freshness for predictor calls.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moesim.core.constants import PredictionVariant
from moesim.core.engine.predictor import ExpertPredictor, rank_experts
from moesim.core.models.routing_trace import RoutingTrace
from moesim.utils.error_utils import ScenarioValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplayResult:
    hit_rate: float
    invocations: int
    hits: int
    lookups: int


def replay_hit_rate(
    trace: RoutingTrace,
    predictor: ExpertPredictor,
    budgets: Sequence[int],
    period: int,
    variant: PredictionVariant = PredictionVariant.ALL_LAYERS,
    warmup: int = 0,
) -> ReplayResult:
    """
    Hit rate of reusing predicted experts for ``period`` prompts.

    Prompts before the first invocation see every expert resident. At
    prompt n > 0 with n % period == 0 the resident set of each layer becomes
    the top-L experts predicted from prompt n-1.

    Args:
        trace: Routing trace to replay
        predictor: Expert predictor
        budgets: Per-layer budget L
        period: Prompts between predictor calls
        variant: Prediction variant
        warmup: Prompts excluded from the hit count

    Returns:
        ReplayResult over the counted prompts
    """
    m, e = trace.num_layers, trace.num_experts
    if period < 1:
        raise ScenarioValidationError(f"period must be >= 1, got {period}")
    if len(budgets) != m or any(not 1 <= b <= e for b in budgets):
        raise ScenarioValidationError(f"budgets must be {m} values in [1, {e}]")
    if not 0 <= warmup < len(trace):
        raise ScenarioValidationError(f"warmup must be in [0, {len(trace)}), got {warmup}")

    resident = np.ones((m, e), dtype=bool)
    layer_index = np.arange(m)[:, None]
    hits = lookups = invocations = 0
    for n, routing in enumerate(trace):
        if n > 0 and n % period == 0:
            prediction = predictor.predict_prompt(trace[n - 1], trace.top_k, variant)
            resident = np.zeros((m, e), dtype=bool)
            for layer, budget in enumerate(budgets):
                resident[layer, rank_experts(prediction.scores[layer], budget)] = True
            invocations += 1
        if n < warmup:
            continue
        top1 = routing[:, :, 0]
        hits += int(resident[layer_index, top1].sum())
        lookups += top1.size

    hit_rate = hits / lookups if lookups else 1.0
    logger.debug(f"replay period={period}: hit rate {hit_rate:.4f} over {lookups} lookups")
    return ReplayResult(hit_rate=hit_rate, invocations=invocations, hits=hits, lookups=lookups)
