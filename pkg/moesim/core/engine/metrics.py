"""
Metrics derived from a simulation event log.

Classes:
    Metrics: Per-request latencies, memory timeline and aggregate rates

Functions:
    collect_metrics: Build Metrics from an EventLog (or its DataFrame)
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from moesim.core.engine.events import EventLog, LogKind
from moesim.utils.stats_utils import percentile_or_nan

REQUEST_COLUMNS = [
    "request_id",
    "task_id",
    "arrival_time",
    "slo_ttft",
    "input_tokens",
    "first_token_time",
    "completion_time",
    "latency",
    "ttft",
    "generated_tokens",
    "slo_violated",
    "dropped",
]


@dataclass(eq=False)
class Metrics:
    """
    Outcome of one simulation run.

    Attributes:
        requests: One row per request (REQUEST_COLUMNS)
        memory_timeline: (time, device_bytes, expert_bytes) rows, time-ordered
        hit_rate: Fraction of routed token-layers whose top choice was resident
        throughput: Generated tokens per second of makespan
        slo_violations: Requests whose first token missed the target, or dropped
        predictor_overhead: Total predictor busy seconds
        total_tokens: Generated tokens
        makespan: Time of the last recorded event
        total_transfer_time: Seconds spent moving experts to the device
        plans: One row per placement plan (time, plan_id, delta_e, delta_e_agnostic, delta_e_aware)
    """

    requests: pd.DataFrame
    memory_timeline: pd.DataFrame
    hit_rate: float
    throughput: float
    slo_violations: int
    predictor_overhead: float
    total_tokens: int
    makespan: float
    total_transfer_time: float
    plans: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def latencies(self) -> np.ndarray:
        return self.requests["latency"].dropna().to_numpy(dtype=float)

    @property
    def ttfts(self) -> np.ndarray:
        return self.requests["ttft"].dropna().to_numpy(dtype=float)

    @property
    def peak_memory_bytes(self) -> int:
        if self.memory_timeline.empty:
            return 0
        return int(self.memory_timeline["device_bytes"].max())

    @property
    def expert_memory_final_bytes(self) -> int:
        if self.memory_timeline.empty:
            return 0
        return int(self.memory_timeline["expert_bytes"].iloc[-1])

    def summary(self) -> Dict[str, Any]:
        """Flat dict of the headline numbers (summary-table columns)."""
        completed = int(self.requests["completion_time"].notna().sum()) if not self.requests.empty else 0
        return {
            "requests": int(len(self.requests)),
            "completed": completed,
            "latency_p50": percentile_or_nan(self.latencies, 50),
            "latency_p90": percentile_or_nan(self.latencies, 90),
            "ttft_p50": percentile_or_nan(self.ttfts, 50),
            "ttft_p90": percentile_or_nan(self.ttfts, 90),
            "hit_rate": self.hit_rate,
            "peak_memory_bytes": self.peak_memory_bytes,
            "expert_memory_final_bytes": self.expert_memory_final_bytes,
            "throughput": self.throughput,
            "slo_violations": self.slo_violations,
            "predictor_overhead": self.predictor_overhead,
            "total_transfer_time": self.total_transfer_time,
            "makespan": self.makespan,
        }


def _sum(frame: pd.DataFrame, column: str) -> float:
    return float(frame[column].fillna(0).sum()) if not frame.empty else 0.0


def collect_metrics(event_log: Union[EventLog, pd.DataFrame]) -> Metrics:
    """
    Derive metrics from a completed run's event log.

    Latency is completion minus arrival, TTFT first token minus arrival and
    throughput generated tokens over the makespan (0 when nothing was
    generated).
    """
    frame = event_log.to_frame() if isinstance(event_log, EventLog) else event_log
    by_kind = {kind: group for kind, group in frame.groupby("kind", sort=False)}
    empty = frame.iloc[0:0]

    arrivals = by_kind.get(LogKind.ARRIVAL, empty)
    first_tokens = by_kind.get(LogKind.FIRST_TOKEN, empty)
    completions = by_kind.get(LogKind.COMPLETE, empty)
    drops = by_kind.get(LogKind.DROP, empty)

    rows: List[Dict[str, Any]] = []
    first_map = dict(zip(first_tokens["request_id"], first_tokens["time"]))
    done_map = {rid: (t, n) for rid, t, n in zip(completions["request_id"], completions["time"], completions["count"])}
    dropped_ids = set(drops["request_id"])
    for record in arrivals.itertuples(index=False):
        rid = record.request_id
        first = first_map.get(rid)
        done = done_map.get(rid)
        ttft = None if first is None else first - record.time
        dropped = rid in dropped_ids
        rows.append(
            {
                "request_id": int(rid),
                "task_id": record.detail,
                "arrival_time": record.time,
                "slo_ttft": record.value,
                "input_tokens": int(record.count),
                "first_token_time": first,
                "completion_time": None if done is None else done[0],
                "latency": None if done is None else done[0] - record.time,
                "ttft": ttft,
                "generated_tokens": 0 if done is None else int(done[1]),
                "slo_violated": bool(dropped or ttft is None or ttft > record.value),
                "dropped": dropped,
            }
        )
    requests = pd.DataFrame(rows, columns=REQUEST_COLUMNS)
    for column in ("first_token_time", "completion_time", "latency", "ttft"):
        requests[column] = requests[column].astype(float)

    routing = by_kind.get(LogKind.ROUTING, empty)
    lookups = _sum(routing, "count")
    hit_rate = _sum(routing, "value") / lookups if lookups > 0 else 1.0

    iterations = by_kind.get(LogKind.ITERATION, empty)
    total_tokens = int(_sum(iterations, "count"))
    makespan = float(frame["time"].max()) if not frame.empty else 0.0
    throughput = total_tokens / makespan if total_tokens > 0 and makespan > 0 else 0.0

    memory = by_kind.get(LogKind.MEMORY, empty)
    memory_timeline = pd.DataFrame(
        {
            "time": memory["time"].to_numpy(dtype=float),
            "device_bytes": memory["value"].to_numpy(dtype=float),
            "expert_bytes": memory["count"].to_numpy(dtype=float),
        }
    )

    plans = by_kind.get(LogKind.PLAN, empty)
    plan_frame = pd.DataFrame(
        {
            "time": plans["time"].to_numpy(dtype=float),
            "plan_id": plans["plan_id"].to_numpy(),
            "delta_e": plans["value"].to_numpy(dtype=float),
            "detail": plans["detail"].to_numpy(),
        }
    )
    if not plan_frame.empty:
        parsed = plan_frame["detail"].str.extract(r"agnostic=(?P<delta_e_agnostic>[0-9.eE+-]+);aware=(?P<delta_e_aware>[0-9.eE+-]+)")
        plan_frame["delta_e_agnostic"] = parsed["delta_e_agnostic"].astype(float)
        plan_frame["delta_e_aware"] = parsed["delta_e_aware"].astype(float)
    plan_frame = plan_frame.drop(columns=["detail"])

    return Metrics(
        requests=requests,
        memory_timeline=memory_timeline,
        hit_rate=float(hit_rate),
        throughput=float(throughput),
        slo_violations=int(requests["slo_violated"].sum()) if not requests.empty else 0,
        predictor_overhead=_sum(by_kind.get(LogKind.PREDICTOR, empty), "value"),
        total_tokens=total_tokens,
        makespan=makespan,
        total_transfer_time=_sum(by_kind.get(LogKind.TRANSFER, empty), "value"),
        plans=plan_frame,
    )
