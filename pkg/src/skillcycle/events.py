"""Ordered event log: the single source for every metric.

Every tool call (request and response), execution outcome, human
intervention, and agent decision lands here as ``(tick, kind, payload)``.
Ticks are simulator time, never wall clock, so two runs with the same
seed serialize to identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .canon import canonical_dumps

KIND_TOOL_CALL = "ToolCall"
KIND_OUTCOME = "Outcome"
KIND_INTERVENTION = "Intervention"
KIND_DECISION = "Decision"

EVENT_KINDS = (KIND_TOOL_CALL, KIND_OUTCOME, KIND_INTERVENTION, KIND_DECISION)


@dataclass
class Event:
    tick: int
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {"tick": self.tick, "kind": self.kind, "payload": self.payload}


@dataclass
class EventLog:
    events: list[Event] = field(default_factory=list)

    def append(self, tick: int, kind: str, payload: dict) -> None:
        if self.events and tick < self.events[-1].tick:
            tick = self.events[-1].tick  # ticks never run backwards
        self.events.append(Event(tick, kind, payload))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def to_bytes(self) -> bytes:
        lines = [canonical_dumps(e.to_dict()) for e in self.events]
        return ("\n".join(lines) + "\n").encode("ascii") if lines else b""

    def write(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
