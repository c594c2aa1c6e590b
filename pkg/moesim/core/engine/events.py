"""
Event queue and event log of the simulator.

Classes:
    ScheduledEvent: Timestamped event ordered by (time, kind, sequence)
    EventQueue: heapq-backed priority queue of ScheduledEvent
    EventLog: Append-only record of what happened, exported as a DataFrame
"""

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import pandas as pd

from moesim.core.constants import EventKind

EVENT_LOG_COLUMNS = ["time", "kind", "request_id", "layer", "plan_id", "value", "count", "detail"]


class LogKind:
    """Record kinds written to the event log"""
    ARRIVAL = "arrival"
    DECISION = "decision"
    ITERATION = "iteration"
    ROUTING = "routing"
    FIRST_TOKEN = "first_token"
    COMPLETE = "complete"
    DROP = "drop"
    PREDICTOR = "predictor"
    PLAN = "plan"
    LOAD_COMPLETE = "load_complete"
    TRANSFER = "transfer"
    MEMORY = "memory"
    PLACEMENT = "placement"


@dataclass(order=True)
class ScheduledEvent:
    """Pending event; equal timestamps resolve by EventKind, then insertion order."""

    time: float
    kind: EventKind
    seq: int
    payload: Dict[str, Any] = field(default_factory=dict, compare=False)


class EventQueue:
    """Min-heap of pending events."""

    def __init__(self):
        self._heap: List[ScheduledEvent] = []
        self._counter = itertools.count()

    def push(self, time: float, kind: EventKind, **payload) -> ScheduledEvent:
        event = ScheduledEvent(float(time), EventKind(kind), next(self._counter), payload)
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> ScheduledEvent:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


class EventLog:
    """
    Append-only event log.

    Every record has the same columns (EVENT_LOG_COLUMNS); unused fields stay
    empty. Records must be appended in non-decreasing time order.
    """

    def __init__(self):
        self.records: List[Dict[str, Any]] = []

    def append(
        self,
        time: float,
        kind: str,
        request_id: Optional[int] = None,
        layer: Optional[int] = None,
        plan_id: Optional[int] = None,
        value: Optional[float] = None,
        count: Optional[int] = None,
        detail: str = "",
    ) -> None:
        self.records.append(
            {
                "time": float(time),
                "kind": kind,
                "request_id": request_id,
                "layer": layer,
                "plan_id": plan_id,
                "value": value,
                "count": count,
                "detail": detail,
            }
        )

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, kind: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["kind"] == kind]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_records(self.records, columns=EVENT_LOG_COLUMNS)
        for column in ("request_id", "layer", "plan_id", "count"):
            frame[column] = frame[column].astype("Int64")
        frame["value"] = frame["value"].astype(float)
        return frame
