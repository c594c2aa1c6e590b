"""
Expert prediction for moesim.

Predicts which experts a future prompt will need from past routing. The
statistical model is an additive-smoothed first-order transition model with
two views of the routing history: layer to layer within a prompt, and prompt
to prompt at the same layer. Per-task expert frequencies feed the expected
token counts of task-aware loading.

Classes:
    TransitionModel: Fitted transition counts and task frequencies
    Prediction: Per-layer scores and top-k experts
    ExpertPredictor: Interface used by the simulator
    MarkovExpertPredictor: ExpertPredictor backed by a TransitionModel

Functions:
    fit, predict_layerwise, predict_prompt_layerwise, predict_all_layers,
    predicted_frequencies
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from moesim.core.constants import DEFAULT_SMOOTHING, SCORE_DECIMALS, PredictionVariant
from moesim.core.models.routing_trace import RoutingTrace
from moesim.utils.error_utils import ScenarioValidationError, error_handler
from moesim.utils.io_utils import read_json, write_json

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


def _smoothed(counts: np.ndarray, smoothing: float) -> np.ndarray:
    """(count + a) / (row total + a * E) along the last axis."""
    num_experts = counts.shape[-1]
    return (counts + smoothing) / (counts.sum(axis=-1, keepdims=True) + smoothing * num_experts)


def rank_experts(scores: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k highest scores along the last axis.

    Scores equal to SCORE_DECIMALS decimals tie, and ties go to the lower
    index.
    """
    rounded = np.round(np.asarray(scores, dtype=float), SCORE_DECIMALS)
    return np.argsort(-rounded, axis=-1, kind="stable")[..., :k]


@dataclass(eq=False)
class TransitionModel:
    """
    Fitted routing statistics.

    Attributes:
        layer_counts: (m-1, E, E) top-1 transitions layer i -> i+1
        prompt_counts: (m, E, E) previous prompt's dominant expert -> top-1
            expert of each token of the next prompt, per layer
        task_counts: Per task, (m, E) counts of every top-k choice
        smoothing: Additive pseudo-count
    """

    layer_counts: np.ndarray
    prompt_counts: np.ndarray
    task_counts: Dict[str, np.ndarray] = field(default_factory=dict)
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        self.layer_counts = np.asarray(self.layer_counts, dtype=float)
        self.prompt_counts = np.asarray(self.prompt_counts, dtype=float)
        self.task_counts = {t: np.asarray(c, dtype=float) for t, c in self.task_counts.items()}
        if self.smoothing <= 0:
            raise ScenarioValidationError(f"smoothing must be positive, got {self.smoothing}")
        if self.prompt_counts.ndim != 3 or self.prompt_counts.shape[1] != self.prompt_counts.shape[2]:
            raise ScenarioValidationError(f"prompt_counts must have shape (m, E, E), got {self.prompt_counts.shape}")
        m, e = self.prompt_counts.shape[0], self.prompt_counts.shape[1]
        if self.layer_counts.shape != (m - 1, e, e):
            raise ScenarioValidationError(f"layer_counts must have shape {(m - 1, e, e)}, got {self.layer_counts.shape}")

    @property
    def num_layers(self) -> int:
        return int(self.prompt_counts.shape[0])

    @property
    def num_experts(self) -> int:
        return int(self.prompt_counts.shape[1])

    @cached_property
    def layer_probabilities(self) -> np.ndarray:
        return _smoothed(self.layer_counts, self.smoothing)

    @cached_property
    def prompt_probabilities(self) -> np.ndarray:
        return _smoothed(self.prompt_counts, self.smoothing)

    def layer_prob(self, layer: int) -> np.ndarray:
        """E x E transition probabilities from ``layer`` to ``layer + 1``."""
        return self.layer_probabilities[layer]

    def prompt_prob(self, layer: int) -> np.ndarray:
        return self.prompt_probabilities[layer]

    @property
    def aggregate_counts(self) -> np.ndarray:
        if not self.task_counts:
            return np.zeros((self.num_layers, self.num_experts))
        return np.sum(list(self.task_counts.values()), axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "smoothing": self.smoothing,
            "layer_counts": self.layer_counts.tolist(),
            "prompt_counts": self.prompt_counts.tolist(),
            "task_counts": {t: c.tolist() for t, c in sorted(self.task_counts.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransitionModel":
        if data.get("format_version") != MODEL_FORMAT_VERSION:
            raise ScenarioValidationError(f"unsupported model format_version {data.get('format_version')}")
        m, e = int(data["num_layers"]), int(data["num_experts"])
        layer_counts = np.asarray(data["layer_counts"], dtype=float).reshape(m - 1, e, e)
        return cls(
            layer_counts=layer_counts,
            prompt_counts=np.asarray(data["prompt_counts"], dtype=float),
            task_counts={t: np.asarray(c) for t, c in data.get("task_counts", {}).items()},
            smoothing=float(data["smoothing"]),
        )

    @error_handler
    def save(self, path: Union[str, Path]) -> None:
        write_json(path, self.to_dict())

    @classmethod
    @error_handler
    def load(cls, path: Union[str, Path]) -> "TransitionModel":
        return cls.from_dict(read_json(path))


@dataclass(eq=False)
class Prediction:
    """
    Predicted experts.

    Attributes:
        layers: Layer index of each row
        scores: (len(layers), E) non-negative scores
        top_k: (len(layers), k) distinct expert indices, best first
    """

    layers: Tuple[int, ...]
    scores: np.ndarray
    top_k: np.ndarray

    def experts(self, layer: int) -> Tuple[int, ...]:
        return tuple(int(x) for x in self.top_k[self.layers.index(layer)])

    def layer_scores(self, layer: int) -> np.ndarray:
        return self.scores[self.layers.index(layer)]

    @classmethod
    def from_scores(cls, layers: Sequence[int], scores: np.ndarray, k: int) -> "Prediction":
        scores = np.atleast_2d(np.asarray(scores, dtype=float))
        return cls(layers=tuple(int(l) for l in layers), scores=scores, top_k=rank_experts(scores, k))


def fit(
    traces: RoutingTrace,
    task_ids: Optional[Sequence[str]] = None,
    smoothing: float = DEFAULT_SMOOTHING,
) -> TransitionModel:
    """
    Tally routing co-occurrences.

    Args:
        traces: Routing trace to learn from
        task_ids: Task label per prompt; falls back to the trace's own labels,
            then to a single unnamed task
        smoothing: Additive pseudo-count of the fitted model

    Returns:
        TransitionModel with exact counts
    """
    if len(traces) == 0:
        raise ScenarioValidationError("cannot fit on an empty trace")
    if task_ids is None:
        task_ids = traces.task_ids
    if task_ids is not None and len(task_ids) != len(traces):
        raise ScenarioValidationError(f"task_ids has {len(task_ids)} entries for {len(traces)} prompts")

    m, e = traces.num_layers, traces.num_experts
    layer_counts = np.zeros((m - 1, e, e))
    prompt_counts = np.zeros((m, e, e))
    task_counts: Dict[str, np.ndarray] = {}

    for n, routing in enumerate(traces):
        top1 = routing[:, :, 0]
        tokens = top1.shape[1]
        if m > 1:
            layer_idx = np.repeat(np.arange(m - 1), tokens)
            np.add.at(layer_counts, (layer_idx, top1[:-1].ravel(), top1[1:].ravel()), 1)
        if n > 0:
            previous = traces.dominant_experts(n - 1)
            layer_idx = np.repeat(np.arange(m), tokens)
            np.add.at(prompt_counts, (layer_idx, np.repeat(previous, tokens), top1.ravel()), 1)

        task = task_ids[n] if task_ids is not None else ""
        offsets = np.arange(m)[:, None, None] * e
        counts = np.bincount((routing + offsets).ravel(), minlength=m * e).reshape(m, e)
        if task in task_counts:
            task_counts[task] += counts
        else:
            task_counts[task] = counts.astype(float)

    logger.debug(f"Fitted transition model on {len(traces)} prompts ({m} layers, {e} experts)")
    return TransitionModel(layer_counts, prompt_counts, task_counts, smoothing)


def predict_layerwise(model: TransitionModel, prev_layer_experts: Iterable[int], layer: int, k: Optional[int] = None) -> Prediction:
    """
    Predict one layer from the experts used at the layer before it.

    Scores are the mean of the layer-transition rows of the previous experts.

    Raises:
        ScenarioValidationError: ``layer`` outside [1, m) or bad expert index
    """
    if not 1 <= layer < model.num_layers:
        raise ScenarioValidationError(f"layer must be in [1, {model.num_layers}), got {layer}")
    previous = np.asarray(list(prev_layer_experts), dtype=np.int64)
    if previous.size == 0:
        raise ScenarioValidationError("prev_layer_experts must not be empty")
    if previous.min() < 0 or previous.max() >= model.num_experts:
        raise ScenarioValidationError(f"expert index out of range [0, {model.num_experts})")
    k = k or previous.size
    scores = model.layer_prob(layer - 1)[previous].mean(axis=0)
    return Prediction.from_scores((layer,), scores, k)


def predict_first_layer(model: TransitionModel, prev_first_layer: Iterable[int], k: int) -> Prediction:
    """Layer 0 from the previous prompt's layer-0 experts: their smoothed histogram."""
    previous = np.asarray(list(prev_first_layer), dtype=np.int64)
    counts = np.bincount(previous, minlength=model.num_experts).astype(float)
    scores = _smoothed(counts, model.smoothing)
    return Prediction.from_scores((0,), scores, k)


def predict_prompt_layerwise(model: TransitionModel, previous_prompt: np.ndarray, k: int) -> Prediction:
    """
    Chain layer-by-layer predictions over a whole prompt.

    Layer 0 comes from the previous prompt's first layer; every later layer
    is predicted from the top-k predicted for the layer before it.

    Args:
        model: Fitted model
        previous_prompt: (m, tokens, k) routing of the previous prompt
        k: Experts per layer to predict
    """
    first = predict_first_layer(model, np.asarray(previous_prompt)[0].ravel(), k)
    scores = [first.scores[0]]
    top = [first.top_k[0]]
    for layer in range(1, model.num_layers):
        step = predict_layerwise(model, top[-1], layer, k)
        scores.append(step.scores[0])
        top.append(step.top_k[0])
    return Prediction(layers=tuple(range(model.num_layers)), scores=np.vstack(scores), top_k=np.vstack(top))


def predict_all_layers(model: TransitionModel, prev_prompt: Sequence[Iterable[int]], k: Optional[int] = None) -> Prediction:
    """
    Predict every layer of the next prompt at once.

    Each layer's scores are the mean of the prompt-transition rows of the
    previous prompt's experts at that layer; an empty set scores uniformly.

    Raises:
        ScenarioValidationError: ``prev_prompt`` does not have m layers
    """
    if len(prev_prompt) != model.num_layers:
        raise ScenarioValidationError(f"prev_prompt needs {model.num_layers} layers, got {len(prev_prompt)}")
    rows = []
    widest = 1
    for layer, experts in enumerate(prev_prompt):
        previous = np.asarray(list(np.atleast_1d(experts)), dtype=np.int64)
        widest = max(widest, previous.size)
        if previous.size == 0:
            rows.append(np.full(model.num_experts, 1.0 / model.num_experts))
        else:
            rows.append(model.prompt_prob(layer)[previous].mean(axis=0))
    return Prediction.from_scores(range(model.num_layers), np.vstack(rows), k or widest)


def predicted_frequencies(model: TransitionModel, task_id: str) -> np.ndarray:
    """
    Smoothed (m, E) expert frequencies of a task.

    Tasks not seen during fit fall back to the aggregate over all tasks.
    """
    counts = model.task_counts.get(task_id)
    if counts is None:
        counts = model.aggregate_counts
    return _smoothed(counts, model.smoothing)


class ExpertPredictor(ABC):
    """Interface the simulator uses to forecast experts and task frequencies."""

    @abstractmethod
    def predict_prompt(
        self, previous_prompt: np.ndarray, k: int, variant: Optional[PredictionVariant] = None
    ) -> Prediction:
        """Predict every layer of the next prompt from the previous prompt's routing."""

    @abstractmethod
    def task_frequencies(self, task_id: str) -> np.ndarray:
        """(m, E) expert frequencies of a task type."""


class MarkovExpertPredictor(ExpertPredictor):
    """
    ExpertPredictor over a fitted TransitionModel.

    The all-layers variant conditions each layer on the previous prompt's
    dominant expert at that layer; the layerwise variant chains predictions
    from the previous prompt's first layer.
    """

    def __init__(self, model: TransitionModel, variant: PredictionVariant = PredictionVariant.ALL_LAYERS):
        self.model = model
        self.variant = PredictionVariant(variant)

    def predict_prompt(
        self, previous_prompt: np.ndarray, k: int, variant: Optional[PredictionVariant] = None
    ) -> Prediction:
        previous_prompt = np.asarray(previous_prompt)
        variant = PredictionVariant(variant) if variant is not None else self.variant
        if variant is PredictionVariant.LAYERWISE:
            return predict_prompt_layerwise(self.model, previous_prompt, k)
        top1 = previous_prompt[:, :, 0]
        e = self.model.num_experts
        dominant = [int(np.bincount(row, minlength=e).argmax()) for row in top1]
        return predict_all_layers(self.model, [[d] for d in dominant], k)

    def task_frequencies(self, task_id: str) -> np.ndarray:
        return predicted_frequencies(self.model, task_id)
