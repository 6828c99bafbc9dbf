"""Totally ordered execution record: every durable append, lifecycle event,
transaction outcome, and cache/tracker delta, in (tick, seq) order.

The trace is sufficient to rebuild every log byte for byte, which is what the
offline verifier does.  Serialized as newline-delimited JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class TraceEntry:
    seq: int
    tick: int
    ev: str
    data: dict

    def to_json(self) -> dict:
        return {"seq": self.seq, "tick": self.tick, "ev": self.ev, **self.data}


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)
    _listeners: list = field(default_factory=list)

    def emit(self, tick: int, ev: str, **data) -> TraceEntry:
        entry = TraceEntry(len(self.entries), tick, ev, data)
        self.entries.append(entry)
        for listener in self._listeners:
            listener(entry)
        return entry

    def subscribe(self, listener) -> None:
        self._listeners.append(listener)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e.to_json(), sort_keys=True) for e in self.entries) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        trace = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            seq, tick, ev = raw.pop("seq"), raw.pop("tick"), raw.pop("ev")
            trace.entries.append(TraceEntry(seq, tick, ev, raw))
        return trace
