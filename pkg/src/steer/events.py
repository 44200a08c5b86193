"""Append-only run log, one JSON object per line."""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Callable, Iterator, List, Optional

FIELDS = ("event", "step_index", "trace_id", "model", "phi", "posterior", "params", "timestamp")

STEP_GENERATED = "step_generated"
FIT_COMPUTED = "fit_computed"
ROUTE_DECIDED = "route_decided"
TRACE_COMPLETED = "trace_completed"
EVENT_TYPES = (STEP_GENERATED, FIT_COMPUTED, ROUTE_DECIDED, TRACE_COMPLETED)


class EventLog:
    """In-memory event log that can be streamed to a JSONL file.

    Every record has exactly the keys in :data:`FIELDS`; unused ones are
    ``None``. ``clock`` is injectable so tests can pin timestamps.
    """

    def __init__(self, clock: Callable[[], float] = time.time, path: Optional[Path] = None):
        self.records: List[dict] = []
        self._clock = clock
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def emit(self, event: str, *, step_index=None, trace_id=None, model=None, phi=None,
             posterior=None, params=None) -> dict:
        if event not in EVENT_TYPES:
            raise ValueError(f"unknown event type {event!r}")
        rec = {
            "event": event,
            "step_index": step_index,
            "trace_id": trace_id,
            "model": getattr(model, "value", model),
            "phi": phi,
            "posterior": posterior,
            "params": params,
            "timestamp": self._clock(),
        }
        with self._lock:
            self.records.append(rec)
            if self._fh is not None:
                self._fh.write(dumps_event(rec) + "\n")
                self._fh.flush()
        return rec

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def of_type(self, event: str) -> List[dict]:
        return [r for r in self.records if r["event"] == event]

    def to_jsonl(self, include_timestamp: bool = True) -> str:
        lines = []
        for rec in self.records:
            if not include_timestamp:
                rec = {**rec, "timestamp": None}
            lines.append(dumps_event(rec))
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def dumps_event(rec: dict) -> str:
    return json.dumps({k: rec[k] for k in FIELDS}, sort_keys=False, separators=(",", ":"))


def read_events(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
