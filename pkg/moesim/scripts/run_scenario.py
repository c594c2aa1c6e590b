"""
Run a scenario sweep and write per-point metrics plus a summary table.

Every combination of the sweep axes (modes x budget fractions x invocation
periods x arrival rates) is simulated independently. Each point writes
``metrics_<mode>_phi<fraction>_p<period>_rate<rate>.csv`` (one row per
request) and, with ``--event-log``, the matching ``events_...csv``. The
summary is ``summary.json`` with a fixed column list and rows sorted by
sweep point.

CLI:
    python -m moesim.scripts.run_scenario --config moesim/scenarios/openmoe_like.json --out results/
    python -m moesim.scripts.run_scenario --config tiny.json --out out/ --mode baseline --mode emoe_a --seed 3

Exit codes: 0 ok, 1 runtime error (including any failed sweep point),
2 validation error.
"""

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from moesim.config.scenario_builder import ScenarioBundle, SweepPoint, build_point, build_scenario, sweep_points
from moesim.config.schemas import ScenarioConfig, load_scenario
from moesim.config.settings import RuntimeSettings
from moesim.core.constants import SCHEMA_VERSION, EngineMode
from moesim.core.engine.simulator import Simulator
from moesim.utils.error_utils import MoeSimError, ScenarioValidationError, configure_logging
from moesim.utils.io_utils import write_json

logger = logging.getLogger("moesim")

SUMMARY_COLUMNS = [
    "mode",
    "budget_fraction",
    "invocation_period",
    "arrival_rate",
    "status",
    "requests",
    "completed",
    "latency_p50",
    "latency_p90",
    "ttft_p50",
    "ttft_p90",
    "hit_rate",
    "peak_memory_bytes",
    "expert_memory_final_bytes",
    "throughput",
    "slo_violations",
    "predictor_overhead",
    "total_transfer_time",
    "makespan",
    "error",
]

CSV_FLOAT_FORMAT = "%.12g"


def _clean(value: Any) -> Any:
    """JSON-safe value: NaN becomes null."""
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def run_point(bundle: ScenarioBundle, point: SweepPoint, out_dir: Path, event_log: bool = False) -> Dict[str, Any]:
    """
    Simulate one sweep point and write its files.

    Failures are reported in the returned row (status ``error``) instead of
    being raised, so sibling points keep running.
    """
    row: Dict[str, Any] = {column: None for column in SUMMARY_COLUMNS}
    row.update(
        mode=point.mode,
        budget_fraction=point.budget_fraction,
        invocation_period=point.invocation_period,
        arrival_rate=point.arrival_rate,
        error="",
    )
    try:
        simulator = Simulator(build_point(bundle, point))
        metrics = simulator.run()
        metrics.requests.to_csv(out_dir / f"metrics_{point.key}.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        if event_log:
            simulator.event_frame().to_csv(out_dir / f"events_{point.key}.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        row.update({k: _clean(v) for k, v in metrics.summary().items()})
        row["status"] = "ok"
    except Exception as e:
        logger.error(f"Sweep point {point.key} failed: {e}")
        row["status"] = "error"
        row["error"] = str(e)
    return row


def run_sweep(
    config: ScenarioConfig,
    out_dir: Path,
    seed: Optional[int] = None,
    modes: Optional[Sequence[str]] = None,
    workers: int = 1,
    event_log: bool = False,
) -> List[Dict[str, Any]]:
    """Run every sweep point; rows come back in sweep-point order."""
    points = sweep_points(config, list(modes) if modes else None)
    if not points:
        raise ScenarioValidationError("sweep.modes: no sweep point left after --mode filtering", {"key": "sweep.modes"})
    bundle = build_scenario(config, seed)
    logger.info(f"Running {len(points)} sweep points with {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_point, bundle, point, out_dir, event_log) for point in points]
            return [future.result() for future in futures]
    return [run_point(bundle, point, out_dir, event_log) for point in points]


def write_summary(out_dir: Path, config: ScenarioConfig, seed: int, rows: List[Dict[str, Any]]) -> Path:
    path = out_dir / "summary.json"
    write_json(
        path,
        {
            "schema_version": SCHEMA_VERSION,
            "scenario": config.name,
            "seed": seed,
            "columns": SUMMARY_COLUMNS,
            "rows": [{column: row.get(column) for column in SUMMARY_COLUMNS} for row in rows],
        },
    )
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run a moesim scenario sweep")
    parser.add_argument("--config", required=True, help="Scenario JSON file")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    parser.add_argument(
        "--mode", action="append", choices=EngineMode.values(), default=None,
        help="Restrict the sweep to this mode (repeatable)",
    )
    parser.add_argument("--workers", type=int, default=None, help="Parallel sweep points")
    parser.add_argument("--event-log", action="store_true", help="Also write each point's event log")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = RuntimeSettings.from_env()
    configure_logging("WARNING" if args.quiet else settings.log_level, settings.log_file)
    workers = max(1, args.workers if args.workers is not None else settings.workers)

    try:
        config = load_scenario(args.config)
        seed = config.seed if args.seed is None else args.seed
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = run_sweep(config, out_dir, seed, args.mode, workers, args.event_log)
        summary = write_summary(out_dir, config, seed, rows)
    except ScenarioValidationError as e:
        logger.error(f"Invalid scenario: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return 2
    except (MoeSimError, OSError) as e:
        logger.error(f"Run failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1

    failed = [row for row in rows if row["status"] != "ok"]
    print(f"Wrote {len(rows) - len(failed)} sweep point(s) and {summary}")
    if failed:
        print(f"{len(failed)} sweep point(s) failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
