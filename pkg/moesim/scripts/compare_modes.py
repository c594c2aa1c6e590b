"""
Compare every sweep point of a summary against baseline.

For each successful row, divides its latency, final expert memory and
throughput by those of the baseline row at the same arrival rate (baseline
ignores budgets and invocation periods).

CLI:
    python -m moesim.scripts.compare_modes --summary results/summary.json --out results/comparison.csv
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from moesim.core.constants import EngineMode
from moesim.utils.error_utils import MoeSimError, ScenarioValidationError, configure_logging, error_handler
from moesim.utils.io_utils import read_json

logger = logging.getLogger("moesim")

COMPARISON_COLUMNS = [
    "mode",
    "budget_fraction",
    "invocation_period",
    "arrival_rate",
    "latency_ratio",
    "latency_p90_ratio",
    "memory_ratio",
    "throughput_ratio",
    "hit_rate",
]


def _ratio(value, reference) -> float:
    if value is None or reference is None or pd.isna(value) or pd.isna(reference) or reference == 0:
        return float("nan")
    return float(value) / float(reference)


@error_handler
def compare_modes(summary_path: Union[str, Path]) -> pd.DataFrame:
    """
    Ratios of every sweep point against baseline.

    Returns:
        DataFrame with COMPARISON_COLUMNS, one row per successful sweep point

    Raises:
        ScenarioValidationError: No baseline row at some arrival rate
    """
    data = read_json(summary_path)
    frame = pd.DataFrame(data["rows"], columns=data["columns"])
    frame = frame[frame["status"] == "ok"]
    baseline = frame[frame["mode"] == EngineMode.BASELINE.value]
    if baseline.empty:
        raise ScenarioValidationError(f"{summary_path}: summary has no baseline row", {"path": str(summary_path)})
    references = baseline.sort_values(["budget_fraction", "invocation_period"]).groupby("arrival_rate").first()

    rows = []
    for record in frame.itertuples(index=False):
        if record.arrival_rate not in references.index:
            raise ScenarioValidationError(
                f"{summary_path}: no baseline row at arrival rate {record.arrival_rate:g}",
                {"arrival_rate": record.arrival_rate},
            )
        reference = references.loc[record.arrival_rate]
        rows.append(
            {
                "mode": record.mode,
                "budget_fraction": record.budget_fraction,
                "invocation_period": record.invocation_period,
                "arrival_rate": record.arrival_rate,
                "latency_ratio": _ratio(record.latency_p50, reference["latency_p50"]),
                "latency_p90_ratio": _ratio(record.latency_p90, reference["latency_p90"]),
                "memory_ratio": _ratio(record.expert_memory_final_bytes, reference["expert_memory_final_bytes"]),
                "throughput_ratio": _ratio(record.throughput, reference["throughput"]),
                "hit_rate": np.nan if record.hit_rate is None else float(record.hit_rate),
            }
        )
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Compare sweep points against baseline")
    parser.add_argument("--summary", required=True, help="summary.json written by run_scenario")
    parser.add_argument("--out", default=None, help="CSV output (defaults to stdout)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    if args.quiet:
        configure_logging("WARNING")

    try:
        comparison = compare_modes(args.summary)
    except ScenarioValidationError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return 2
    except MoeSimError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return 1

    if args.out:
        comparison.to_csv(args.out, index=False, float_format="%.12g")
        print(f"Wrote {len(comparison)} comparison row(s) to {args.out}")
    else:
        print(comparison.to_csv(index=False, float_format="%.12g"), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
