"""
Workload generation for moesim.

Generates request arrival traces and expert routing traces with controllable
statistical structure, measures that structure, calibrates the generator to
target correlations and classifies prompt text into task types.

Functions:
    gen_request_trace: Poisson arrivals with per-task token lengths and SLOs
    gen_routing_trace: Markov-structured ground-truth routing
    calibrate_trace: Tune transition matrices to target correlations
    extract_task_type: Keyword-count task classification
    cross_correlation: Lag-0 Pearson correlation of two index sequences
    measure_layer_correlation / measure_prompt_correlation: Trace statistics
    default_task_profiles: The five built-in task profiles
"""

import logging
import re
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from moesim.core.constants import (
    CALIBRATION_TOLERANCE,
    DEFAULT_SAMPLE_PROMPTS,
    DEFAULT_SAMPLE_TOKENS,
    DEFAULT_SENSITIVITY_THRESHOLD,
    DEFAULT_TASK_ID,
    DEFAULT_TOKEN_DISPERSION,
    MAX_OUTPUT_TOKENS,
    PROBABILITY_TOLERANCE,
    ETaskType,
)
from moesim.core.engine.expert_store import derive_sensitivity
from moesim.core.models.model_shape import ModelShape
from moesim.core.models.request import Request
from moesim.core.models.routing_trace import RoutingTrace, TraceCalibration
from moesim.core.models.task_profile import LengthDistribution, TaskProfile
from moesim.utils.error_utils import ScenarioValidationError, error_handler
from moesim.utils.io_utils import read_jsonl, write_jsonl
from moesim.utils.stats_utils import (
    gumbel_top_k,
    mixing_matrix,
    normalize_rows,
    pearson_rows,
    sample_index,
    stationary_distribution,
)

logger = logging.getLogger(__name__)

TaskMix = Union[Mapping[str, float], Sequence[float], None]


# Built-in task types. Accuracy curves are (fraction of layers routed
# accurately, task accuracy) points of a progressive-randomisation study.
DEFAULT_TASK_SPECS = [
    {
        "task_id": ETaskType.CLASSIFICATION,
        "name": "classification",
        "keywords": ("classify", "classification", "category", "sentiment", "label"),
        "input_length": (200.0, 380.0),
        "output_length": (120.0, 230.0),
        "slo_ttft": 12.0,
        "accuracy_curve": ((0.0, 0.92), (0.5, 0.95), (1.0, 0.97)),
    },
    {
        "task_id": ETaskType.COMPARISON,
        "name": "comparison",
        "keywords": ("compare", "comparison", "versus", "difference", "contrast"),
        "input_length": (300.0, 560.0),
        "output_length": (150.0, 280.0),
        "slo_ttft": 14.0,
        "accuracy_curve": ((0.0, 0.91), (0.5, 0.94), (1.0, 0.96)),
    },
    {
        "task_id": ETaskType.QUESTION_ANSWERING,
        "name": "question answering",
        "keywords": ("answer", "question", "explain", "who", "when", "where"),
        "input_length": (120.0, 220.0),
        "output_length": (60.0, 110.0),
        "slo_ttft": 8.0,
        "accuracy_curve": ((0.0, 0.6), (0.5, 0.82), (1.0, 0.98)),
    },
    {
        "task_id": ETaskType.SUMMARIZATION,
        "name": "summarization",
        "keywords": ("summarize", "summary", "synopsis", "tldr", "condense"),
        "input_length": (600.0, 1100.0),
        "output_length": (220.0, 400.0),
        "slo_ttft": 20.0,
        "accuracy_curve": ((0.0, 0.35), (0.5, 0.6), (0.75, 0.8), (1.0, 0.97)),
    },
    {
        "task_id": ETaskType.CONVERSATION,
        "name": "conversation",
        "keywords": ("chat", "hello", "conversation", "talk", "tell"),
        "input_length": (150.0, 280.0),
        "output_length": (420.0, 800.0),
        "slo_ttft": 25.0,
        "accuracy_curve": ((0.0, 0.3), (0.5, 0.55), (1.0, 0.96)),
    },
]


def skewed_routing_prior(shape: ModelShape, skew: float, offset: int = 0) -> np.ndarray:
    """
    Zipf-like per-layer expert frequencies.

    Layer l favours expert (offset + l) mod E most, the next index second and
    so on, with weight 1 / (rank + 1) ** skew. ``skew`` 0 gives the uniform
    distribution.

    Returns:
        (m, E) array with rows summing to 1
    """
    if skew < 0:
        raise ScenarioValidationError(f"routing skew must be non-negative, got {skew}")
    m, e = shape.num_moe_layers, shape.experts_per_layer
    experts = np.arange(e)
    rows = []
    for layer in range(m):
        rank = (experts - offset - layer) % e
        weights = 1.0 / np.power(rank + 1.0, skew)
        rows.append(weights / weights.sum())
    return np.vstack(rows)


def default_task_profiles(
    shape: ModelShape,
    routing_skew: float = 1.0,
    threshold: float = DEFAULT_SENSITIVITY_THRESHOLD,
) -> List[TaskProfile]:
    """Build the five built-in task profiles for a model shape."""
    profiles = []
    for index, spec in enumerate(DEFAULT_TASK_SPECS):
        output_mean, output_p90 = spec["output_length"]
        input_mean, input_p90 = spec["input_length"]
        profiles.append(
            TaskProfile(
                task_id=spec["task_id"],
                name=spec["name"],
                keywords=spec["keywords"],
                output_length_dist=LengthDistribution(output_mean, output_p90),
                input_length_dist=LengthDistribution(input_mean, input_p90),
                expected_output_tokens=output_mean,
                slo_ttft=spec["slo_ttft"],
                sensitivity=derive_sensitivity(spec["accuracy_curve"], shape.num_moe_layers, threshold),
                routing_prior=skewed_routing_prior(shape, routing_skew, offset=index * 3),
            )
        )
    return profiles


def _resolve_task_mix(task_mix: TaskMix, profiles: Sequence[TaskProfile]) -> np.ndarray:
    if task_mix is None:
        return np.full(len(profiles), 1.0 / len(profiles))
    if isinstance(task_mix, Mapping):
        known = {p.task_id for p in profiles}
        unknown = sorted(set(task_mix) - known)
        if unknown:
            raise ScenarioValidationError(f"task_mix references unknown task(s): {', '.join(unknown)}")
        mix = np.array([float(task_mix.get(p.task_id, 0.0)) for p in profiles])
    else:
        mix = np.asarray(task_mix, dtype=float)
        if mix.shape != (len(profiles),):
            raise ScenarioValidationError(
                f"task_mix needs {len(profiles)} entries, got {mix.shape[0] if mix.ndim else 0}"
            )
    if np.any(mix < 0) or abs(mix.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise ScenarioValidationError(f"task_mix must be non-negative and sum to 1, got sum {mix.sum():.12g}")
    return mix


def _poisson_arrivals(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    """Cumulative exponential gaps, drawn in batches until the horizon is passed."""
    batch = max(16, int(rate * duration + 4.0 * np.sqrt(rate * duration) + 16))
    arrivals: List[np.ndarray] = []
    last = 0.0
    while True:
        times = last + np.cumsum(rng.exponential(scale=1.0 / rate, size=batch))
        inside = times[times <= duration]
        arrivals.append(inside)
        if inside.shape[0] < batch:
            break
        last = float(times[-1])
    return np.concatenate(arrivals)


def gen_request_trace(
    rate: float,
    duration: float,
    task_mix: TaskMix,
    seed: int,
    profiles: Sequence[TaskProfile],
    max_requests: Optional[int] = None,
    max_output_tokens: int = MAX_OUTPUT_TOKENS,
) -> List[Request]:
    """
    Generate a Poisson request trace.

    Args:
        rate: Arrival rate in requests per second (>= 0)
        duration: Trace horizon in seconds
        task_mix: Task probabilities (mapping by task_id or vector aligned
            with ``profiles``); None means uniform over profiles
        seed: Seed of the random stream
        profiles: Task profiles to draw token counts and SLOs from
        max_requests: Optional cap on the number of requests
        max_output_tokens: Cap on true generation length

    Returns:
        Requests in arrival order, ids 0..n-1

    Raises:
        ScenarioValidationError: Negative rate or mis-normalised task_mix
    """
    if rate < 0:
        raise ScenarioValidationError(f"rate must be non-negative, got {rate}")
    if duration < 0:
        raise ScenarioValidationError(f"duration must be non-negative, got {duration}")
    if not profiles:
        raise ScenarioValidationError("at least one task profile is required")
    mix = _resolve_task_mix(task_mix, profiles)
    if rate == 0 or duration == 0:
        return []

    rng = np.random.default_rng(seed)
    arrivals = _poisson_arrivals(rng, rate, duration)
    if max_requests is not None:
        arrivals = arrivals[:max_requests]
    count = arrivals.shape[0]

    task_index = rng.choice(len(profiles), size=count, p=mix)
    input_tokens = np.zeros(count, dtype=np.int64)
    output_tokens = np.zeros(count, dtype=np.int64)
    for idx, profile in enumerate(profiles):
        members = np.flatnonzero(task_index == idx)
        if members.size == 0:
            continue
        input_tokens[members] = profile.sample_input_tokens(rng, members.size)
        output_tokens[members] = profile.sample_output_tokens(rng, members.size, max_tokens=max_output_tokens)

    requests = []
    for i in range(count):
        profile = profiles[task_index[i]]
        estimate = max(1, int(round(profile.expected_output_tokens)))
        requests.append(
            Request(
                request_id=i,
                arrival_time=float(arrivals[i]),
                task_id=profile.task_id,
                input_tokens=int(input_tokens[i]),
                slo_ttft=profile.slo_ttft,
                remaining_gen_estimate=estimate,
                initial_gen_estimate=estimate,
                output_tokens=int(output_tokens[i]),
                prompt_index=i,
            )
        )
    logger.debug(f"Generated {count} requests at rate {rate}/s over {duration}s")
    return requests


def gen_routing_trace(
    shape: ModelShape,
    calibration: TraceCalibration,
    prompts: int,
    tokens_per_prompt: int,
    task_ids: Optional[Sequence[str]] = None,
    profiles: Optional[Sequence[TaskProfile]] = None,
) -> RoutingTrace:
    """
    Generate ground-truth routing for a sequence of prompts.

    Each prompt's seed expert is drawn from the entry-layer prompt-transition
    row of the previous prompt's dominant entry-layer expert. Entry-layer
    tokens route to the seed with weight 1 - dispersion and otherwise to the
    long-run entry-layer distribution of the prompt chain, reweighted by the
    task's routing prior. From then on each token's layer i+1 choices are
    drawn from the layer-transition row of its layer-i top expert alone, so
    deeper layers inherit the prompt's context only through the chain. The k
    choices of a token come from one draw without replacement: the top
    choice follows the row and the remaining k-1 come from the same row.

    Args:
        shape: Model geometry
        calibration: Transition matrices and seed
        prompts: Number of prompts
        tokens_per_prompt: Tokens per prompt
        task_ids: Optional task label per prompt (selects routing priors)
        profiles: Task profiles supplying routing priors

    Returns:
        RoutingTrace with ``prompts`` arrays of shape (m, tokens, k)

    Raises:
        ScenarioValidationError: Matrices do not conform to the shape
    """
    calibration.validate(shape)
    if prompts < 0 or tokens_per_prompt < 1:
        raise ScenarioValidationError("prompts must be >= 0 and tokens_per_prompt >= 1")
    if task_ids is not None and len(task_ids) != prompts:
        raise ScenarioValidationError(f"task_ids has {len(task_ids)} entries for {prompts} prompts")

    m, e, k = shape.num_moe_layers, shape.experts_per_layer, shape.top_k
    rng = np.random.default_rng(calibration.rng_seed)
    dispersion = calibration.token_dispersion
    entry_transition = calibration.prompt_transition[0]
    background = stationary_distribution(entry_transition)
    bases: Dict[str, np.ndarray] = {}
    for profile in profiles or ():
        if profile.routing_prior.shape != (m, e):
            raise ScenarioValidationError(f"task '{profile.task_id}': routing_prior must have shape {(m, e)}")
        bases[profile.task_id] = normalize_rows(background * profile.routing_prior[0], background)

    previous_dominant = int(calibration.starting_experts(shape)[0])
    out: List[np.ndarray] = []

    for n in range(prompts):
        base = bases.get(task_ids[n], background) if task_ids is not None else background
        seed_expert = sample_index(entry_transition[previous_dominant], rng)
        entry = dispersion * base
        entry[seed_expert] += 1.0 - dispersion

        routing = np.empty((m, tokens_per_prompt, k), dtype=np.int64)
        routing[0] = gumbel_top_k(np.broadcast_to(entry, (tokens_per_prompt, e)), k, rng)
        for layer in range(1, m):
            routing[layer] = gumbel_top_k(calibration.layer_transition[layer - 1][routing[layer - 1, :, 0]], k, rng)

        previous_dominant = int(np.bincount(routing[0, :, 0], minlength=e).argmax())
        out.append(routing)

    return RoutingTrace(out, num_experts=e, task_ids=task_ids)


@error_handler
def extract_task_type(
    prompt_text: str,
    profiles: Sequence[TaskProfile],
    default_task: str = DEFAULT_TASK_ID,
) -> str:
    """
    Classify a prompt by counting keyword occurrences.

    Matching is case-insensitive on whole words. The task with the most
    matches wins; ties go to the smallest task_id and a prompt without any
    match is assigned ``default_task``.

    Examples:
        >>> extract_task_type("Summarize the following text", profiles)
        'sum'
    """
    if not profiles:
        raise ScenarioValidationError("extract_task_type needs at least one profile")
    text = prompt_text.lower()
    best_task, best_count = None, 0
    for profile in sorted(profiles, key=lambda p: p.task_id):
        count = sum(len(re.findall(r"\b" + re.escape(keyword) + r"\b", text)) for keyword in profile.keywords)
        if count > best_count:
            best_task, best_count = profile.task_id, count
    return best_task if best_task is not None else default_task


def cross_correlation(a: Sequence[int], b: Sequence[int]) -> float:
    """
    Lag-0 Pearson correlation of two index sequences.

    A sequence with zero variance correlates as 0.

    Examples:
        >>> cross_correlation([1, 2, 3, 4], [4, 3, 2, 1])
        -1.0
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise ScenarioValidationError(f"sequences must be 1-D with equal lengths, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise ScenarioValidationError("sequences need at least 2 elements")
    return float(pearson_rows(a[None, :], b[None, :])[0])


def _stacked_top1(trace: RoutingTrace) -> Optional[np.ndarray]:
    shapes = {p.shape[:2] for p in trace.prompts}
    if len(shapes) != 1:
        return None
    return np.stack([p[:, :, 0] for p in trace.prompts])


def measure_layer_correlation(trace: RoutingTrace) -> float:
    """Mean correlation between consecutive layers' top-1 token sequences within a prompt."""
    if len(trace) == 0 or trace.num_layers < 2:
        return 0.0
    stacked = _stacked_top1(trace)
    if stacked is not None:
        return float(pearson_rows(stacked[:, :-1, :], stacked[:, 1:, :]).mean())
    values = [pearson_rows(trace.top1(n)[:-1], trace.top1(n)[1:]).mean() for n in range(len(trace))]
    return float(np.mean(values))


def measure_prompt_correlation(trace: RoutingTrace) -> float:
    """
    Correlation between consecutive prompts' dominant entry-layer experts.

    The sequence of each prompt's most frequent layer-0 top-1 expert is
    correlated with the same sequence one prompt later.
    """
    if len(trace) < 3:
        return 0.0
    dominant = np.array([trace.dominant_experts(n)[0] for n in range(len(trace))])
    return cross_correlation(dominant[:-1], dominant[1:])


def _bisect_weight(measure: Callable[[float], float], target: float, iterations: int) -> Tuple[float, float]:
    """Search a mixing weight in [0, 1] whose measured correlation is closest to target."""
    lo, hi = 0.0, 1.0
    best_weight, best_value = 0.0, measure(0.0)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        value = measure(mid)
        if abs(value - target) < abs(best_value - target):
            best_weight, best_value = mid, value
        if abs(value - target) < 1e-3:
            break
        if value < target:
            lo = mid
        else:
            hi = mid
    return best_weight, best_value


def calibrated_matrices(shape: ModelShape, layer_weight: float, prompt_weight: float) -> Tuple[np.ndarray, np.ndarray]:
    """Layer and prompt transition stacks mixing identity and uniform with the given weights."""
    m, e = shape.num_moe_layers, shape.experts_per_layer
    layer = np.broadcast_to(mixing_matrix(e, layer_weight), (m - 1, e, e)).copy()
    prompt = np.broadcast_to(mixing_matrix(e, prompt_weight), (m, e, e)).copy()
    return layer, prompt


def calibrate_trace(
    shape: ModelShape,
    target_layer_corr: float,
    target_prompt_corr: float,
    seed: int = 0,
    token_dispersion: float = DEFAULT_TOKEN_DISPERSION,
    sample_prompts: int = DEFAULT_SAMPLE_PROMPTS,
    sample_tokens: int = DEFAULT_SAMPLE_TOKENS,
    profiles: Optional[Sequence[TaskProfile]] = None,
    task_ids: Optional[Sequence[str]] = None,
    iterations: int = 16,
    tolerance: float = CALIBRATION_TOLERANCE,
) -> TraceCalibration:
    """
    Tune identity/uniform mixing weights to target correlations.

    Each weight is found by bisection against the correlation measured on a
    sample trace generated with the same seed, so successive samples share
    their random numbers. Entry-layer routing does not depend on the layer
    matrices, so the prompt weight is tuned first and the layer weight is
    tuned with it fixed. Both correlations are then measured once more on
    the sample of the final matrices; a measured value further than
    ``tolerance`` from its target is logged as a warning.

    Returns:
        TraceCalibration carrying the targets and the final measured values
    """
    if task_ids is not None and len(task_ids) != sample_prompts:
        raise ScenarioValidationError("task_ids must have one entry per sample prompt")
    if sample_prompts < 3:
        raise ScenarioValidationError(f"sample_prompts must be >= 3, got {sample_prompts}")

    def sample(layer_weight: float, prompt_weight: float) -> RoutingTrace:
        layer, prompt = calibrated_matrices(shape, layer_weight, prompt_weight)
        calibration = TraceCalibration(
            layer_transition=layer,
            prompt_transition=prompt,
            rng_seed=seed,
            token_dispersion=token_dispersion,
        )
        return gen_routing_trace(shape, calibration, sample_prompts, sample_tokens, task_ids, profiles)

    prompt_weight, _ = _bisect_weight(
        lambda w: measure_prompt_correlation(sample(0.0, w)), target_prompt_corr, iterations
    )
    layer_weight = 0.0
    if shape.num_moe_layers > 1:
        layer_weight, _ = _bisect_weight(
            lambda w: measure_layer_correlation(sample(w, prompt_weight)), target_layer_corr, iterations
        )

    final = sample(layer_weight, prompt_weight)
    layer_value = measure_layer_correlation(final)
    prompt_value = measure_prompt_correlation(final)
    logger.info(
        f"Calibrated trace: layer weight {layer_weight:.4f} (corr {layer_value:.3f}, target {target_layer_corr}), "
        f"prompt weight {prompt_weight:.4f} (corr {prompt_value:.3f}, target {target_prompt_corr})"
    )
    checks = [("prompt", prompt_value, target_prompt_corr)]
    if shape.num_moe_layers > 1:
        checks.insert(0, ("layer", layer_value, target_layer_corr))
    for name, value, target in checks:
        if abs(value - target) > tolerance:
            logger.warning(
                f"Calibrated {name} correlation {value:.3f} misses target {target} by more than {tolerance}"
            )

    layer, prompt = calibrated_matrices(shape, layer_weight, prompt_weight)
    return TraceCalibration(
        layer_transition=layer,
        prompt_transition=prompt,
        target_layer_corr=target_layer_corr,
        target_prompt_corr=target_prompt_corr,
        rng_seed=seed,
        token_dispersion=token_dispersion,
        measured_layer_corr=layer_value,
        measured_prompt_corr=prompt_value,
    )


@error_handler
def write_trace_jsonl(trace: RoutingTrace, path) -> None:
    """Write one JSON record per prompt."""
    write_jsonl(path, trace.to_records())


@error_handler
def read_trace_jsonl(path, num_experts: int) -> RoutingTrace:
    return RoutingTrace.from_records(read_jsonl(path), num_experts=num_experts)
