"""Append-only audit stream (JSON lines).

Every security-relevant operation lands here exactly once: identity and
login flows, policy decisions, vault activity, privileged-session records,
anomaly flags. Sinks are pluggable; external log systems attach by
implementing ``AuditSink.append``.
"""

from __future__ import annotations

import json
import sys
import threading
from typing import Any, Callable, Iterable, Optional


class AuditSink:
    def append(self, record: dict) -> None:
        raise NotImplementedError


class MemorySink(AuditSink):
    """Test sink; keeps records in arrival order."""

    def __init__(self):
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)

    def lines(self) -> list[str]:
        with self._lock:
            return [json.dumps(r, sort_keys=True) for r in self.records]


class JsonLinesSink(AuditSink):
    """Appends one JSON object per line to a file, or stdout for path "-"."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            if self.path == "-":
                print(line, file=sys.stdout, flush=True)
            else:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")


class AuditLog:
    """Writer facade: stamps time and serializes appends."""

    def __init__(self, sink: AuditSink, clock: Callable[[], float]):
        self._sink = sink
        self._clock = clock
        self._lock = threading.Lock()

    def emit(self, op: str, **fields: Any) -> dict:
        record = {"time": self._clock(), "op": op}
        record.update(fields)
        with self._lock:
            self._sink.append(record)
        return record


def read_jsonl(path: str) -> Iterable[dict]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def match_filters(record: dict, filters: dict[str, Optional[str]]) -> bool:
    """True when every non-None filter equals the record's field (as text)."""
    for field, wanted in filters.items():
        if wanted is None:
            continue
        if str(record.get(field)) != str(wanted):
            return False
    return True
