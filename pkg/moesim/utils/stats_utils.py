"""
Statistical helpers for moesim.

Small numpy/scipy routines shared by the trace generator, the predictor and
the replay experiments: correlation over batches of sequences, log-normal
fitting from summary statistics, sampling without replacement and Markov
chain utilities.
"""

import math
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from moesim.core.constants import PROBABILITY_TOLERANCE
from moesim.utils.error_utils import ScenarioValidationError

P90_QUANTILE = float(norm.ppf(0.9))


def pearson_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Lag-0 Pearson correlation between matching rows of two 2-D arrays.

    Rows where either side has zero variance correlate as 0.

    Args:
        a: Array of shape (rows, n)
        b: Array of the same shape

    Returns:
        Array of shape (rows,) with values in [-1, 1]

    Examples:
        >>> pearson_rows(np.array([[1, 2, 3]]), np.array([[3, 2, 1]]))
        array([-1.])
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da = a - a.mean(axis=-1, keepdims=True)
    db = b - b.mean(axis=-1, keepdims=True)
    cov = (da * db).sum(axis=-1)
    scale = np.sqrt((da * da).sum(axis=-1) * (db * db).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(scale > 0, cov / np.where(scale > 0, scale, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def lognormal_params(mean: float, p90: float) -> Tuple[float, float]:
    """
    Solve (mu, sigma) of a log-normal with the given mean and 90th percentile.

    Uses mean = exp(mu + sigma^2 / 2) and p90 = exp(mu + z * sigma), picking
    the smaller root of the resulting quadratic in sigma.

    Args:
        mean: Distribution mean (> 0)
        p90: 90th percentile, mean < p90 <= mean * exp(z^2 / 2)

    Returns:
        Tuple (mu, sigma)

    Raises:
        ScenarioValidationError: If no log-normal has these statistics
    """
    if mean <= 0 or p90 <= mean:
        raise ScenarioValidationError(
            f"log-normal needs 0 < mean < p90, got mean={mean}, p90={p90}"
        )
    z = P90_QUANTILE
    gap = z * z - 2.0 * math.log(p90 / mean)
    if gap < 0:
        raise ScenarioValidationError(
            f"p90={p90} is too far above mean={mean} for a log-normal "
            f"(max {mean * math.exp(z * z / 2):.1f})"
        )
    sigma = z - math.sqrt(gap)
    mu = math.log(mean) - sigma * sigma / 2.0
    return mu, sigma


def normalize_rows(weights: np.ndarray, fallback: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Normalize the last axis to sum to 1.

    Rows summing to zero take the matching row of ``fallback`` (or the
    uniform distribution when no fallback is given).
    """
    weights = np.asarray(weights, dtype=float)
    sums = weights.sum(axis=-1, keepdims=True)
    if fallback is None:
        fallback = np.full(weights.shape, 1.0 / weights.shape[-1])
    fallback = np.broadcast_to(fallback, weights.shape)
    safe = np.where(sums > 0, sums, 1.0)
    return np.where(sums > 0, weights / safe, fallback)


def check_stochastic(matrix: np.ndarray, name: str) -> None:
    """Raise if any row along the last axis is negative or does not sum to 1."""
    matrix = np.asarray(matrix, dtype=float)
    if np.any(matrix < 0) or not np.all(np.isfinite(matrix)):
        raise ScenarioValidationError(f"{name}: entries must be finite and non-negative")
    sums = matrix.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ScenarioValidationError(f"{name}: rows must sum to 1 (max deviation {worst:.3g})")


def mixing_matrix(num_states: int, weight: float) -> np.ndarray:
    """weight * I + (1 - weight) * U, a row-stochastic E x E matrix."""
    if not 0.0 <= weight <= 1.0:
        raise ScenarioValidationError(f"mixing weight must be in [0, 1], got {weight}")
    uniform = np.full((num_states, num_states), 1.0 / num_states)
    return weight * np.eye(num_states) + (1.0 - weight) * uniform


def gumbel_top_k(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw k distinct indices per row without replacement, proportional to the row.

    Position 0 is a plain categorical sample of the row. Zero-probability
    entries are never drawn ahead of positive ones; when a row has fewer than
    k positive entries the remainder is filled in ascending index order.
    The generator is advanced by exactly ``rows.size`` draws regardless of
    the row contents.

    Args:
        rows: Array of shape (n, E) of non-negative weights
        k: Number of indices per row
        rng: numpy random generator

    Returns:
        Integer array of shape (n, k)
    """
    rows = np.asarray(rows, dtype=float)
    noise = rng.gumbel(size=rows.shape)
    with np.errstate(divide="ignore"):
        keys = np.where(rows > 0, np.log(rows) + noise, -np.inf)
    order = np.argsort(-keys, axis=-1, kind="stable")
    return order[..., :k]


def sample_index(weights: np.ndarray, rng: np.random.Generator) -> int:
    """
    One categorical draw from non-negative weights.

    Consumes exactly one uniform variate; zero-weight entries are never drawn.
    """
    cumulative = np.cumsum(np.asarray(weights, dtype=float))
    u = rng.random() * cumulative[-1]
    return int(min(np.searchsorted(cumulative, u, side="right"), cumulative.shape[0] - 1))


def stationary_distribution(transition: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """
    Stationary distribution of a row-stochastic matrix by power iteration.

    Args:
        transition: E x E row-stochastic matrix
        tol: L1 convergence tolerance
        max_iter: Iteration cap

    Returns:
        Length-E probability vector pi with pi @ P = pi
    """
    transition = np.asarray(transition, dtype=float)
    check_stochastic(transition, "transition")
    pi = np.full(transition.shape[0], 1.0 / transition.shape[0])
    for _ in range(max_iter):
        nxt = pi @ transition
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    return pi


def bayes_rate(transition: np.ndarray) -> float:
    """Best achievable top-1 accuracy of predicting the next state: sum_i pi(i) max_j P(i, j)."""
    pi = stationary_distribution(transition)
    return float(pi @ np.asarray(transition).max(axis=1))


def percentile_or_nan(values, q: float) -> float:
    """np.percentile that returns NaN for empty input."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan")
    return float(np.percentile(values, q))


# Module metadata
__version__ = "1.0.0"
__author__ = "moesim Development Team"
