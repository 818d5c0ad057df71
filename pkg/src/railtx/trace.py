"""Event trace recording.

Every engine owns a TraceRecorder.  Transports and protocols append events;
tests and the benchmark CLI read them back to check ordering invariants and
to measure virtual-time spans.  Events can be exported as JSON lines, one
object per line, in the schema described in docs/trace.md.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, TextIO


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    vtime: float
    wall: float
    src: str
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {"seq": self.seq, "vtime": self.vtime, "wall": self.wall,
               "src": self.src, "kind": self.kind}
        obj.update(self.fields)
        return json.dumps(obj, separators=(",", ":"), sort_keys=True)


class TraceRecorder:
    """Append-only, thread-safe event log with a transfer-label registry.

    `seq` is assigned under the lock, so it is a total order over all events
    recorded through one recorder regardless of which thread emitted them.
    """

    def __init__(self, src: str = "", clock: Callable[[], float] | None = None) -> None:
        self._lock = threading.Lock()
        self._events: list[TraceEvent] = []
        self._labels: dict[int, str] = {}
        self._src = src
        self._seq = 0
        self._wall_clock = clock

    def record(self, event: str, vtime: float = 0.0, src: str | None = None,
               **fields: Any) -> TraceEvent:
        import time
        wall = self._wall_clock() if self._wall_clock is not None else time.monotonic()
        with self._lock:
            ev = TraceEvent(seq=self._seq, vtime=float(vtime), wall=wall,
                            src=src if src is not None else self._src,
                            kind=event, fields=fields)
            self._seq += 1
            self._events.append(ev)
        return ev

    def label_transfer(self, transfer_id: int, label: str) -> None:
        with self._lock:
            self._labels[transfer_id] = label

    def label_of(self, transfer_id: int) -> str | None:
        with self._lock:
            return self._labels.get(transfer_id)

    def events(self, kind: str | None = None, **match: Any) -> list[TraceEvent]:
        with self._lock:
            evs = list(self._events)
        if kind is not None:
            evs = [e for e in evs if e.kind == kind]
        if match:
            evs = [e for e in evs if all(e.fields.get(k) == v for k, v in match.items())]
        return evs

    def labels(self) -> dict[int, str]:
        with self._lock:
            return dict(self._labels)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def dump(self, fp: TextIO) -> None:
        with self._lock:
            evs = list(self._events)
            labels = dict(self._labels)
        for ev in evs:
            fp.write(ev.to_json() + "\n")
        for tid in sorted(labels):
            obj = {"seq": -1, "vtime": 0.0, "wall": 0.0, "src": self._src,
                   "kind": "label", "transfer_id": tid, "label": labels[tid]}
            fp.write(json.dumps(obj, separators=(",", ":"), sort_keys=True) + "\n")

    def dump_path(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            self.dump(fp)


def load_events(lines: Iterable[str]) -> Iterator[dict[str, Any]]:
    for line in lines:
        line = line.strip()
        if line:
            yield json.loads(line)


def load_path(path: str) -> list[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fp:
        return list(load_events(fp))
