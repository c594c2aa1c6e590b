"""
Utility modules for moesim.

This package contains reusable helpers for statistics, file I/O, and error
handling throughout the simulator.
"""

from moesim.utils.error_utils import (
    MoeSimError,
    ScenarioValidationError,
    RoutingError,
    InvalidTransitionError,
    SimulationError,
    configure_logging,
    error_handler,
    logger,
)

from moesim.utils.io_utils import (
    read_json,
    write_json,
    read_jsonl,
    write_jsonl,
)

from moesim.utils.stats_utils import (
    pearson_rows,
    lognormal_params,
    normalize_rows,
    mixing_matrix,
    gumbel_top_k,
    sample_index,
    stationary_distribution,
    bayes_rate,
)

__all__ = [
    # Error handling
    "MoeSimError",
    "ScenarioValidationError",
    "RoutingError",
    "InvalidTransitionError",
    "SimulationError",
    "configure_logging",
    "error_handler",
    "logger",
    # File I/O
    "read_json",
    "write_json",
    "read_jsonl",
    "write_jsonl",
    # Statistics
    "pearson_rows",
    "lognormal_params",
    "normalize_rows",
    "mixing_matrix",
    "gumbel_top_k",
    "sample_index",
    "stationary_distribution",
    "bayes_rate",
]

__version__ = "1.0.0"
