"""Append-only event log shared by the simulation modules."""

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

ARRIVAL = "Arrival"
ADMISSION = "Admission"
TOKEN_EMITTED = "TokenEmitted"
PREEMPTION = "Preemption"
RESUME = "Resume"
FINISH = "Finish"
PROBE_DISPATCHED = "ProbeDispatched"
ATTACK_DISPATCHED = "AttackDispatched"
ATTACK_SLEEP = "AttackSleep"
KV_SAMPLE = "KvSample"


@dataclass
class Event:
    t_us: int
    kind: str
    request_id: Optional[int] = None
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        doc: Dict[str, Any] = {"t_us": self.t_us, "kind": self.kind}
        if self.request_id is not None:
            doc["request_id"] = self.request_id
        if self.detail:
            doc["detail"] = self.detail
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)


class EventLog:
    """Timestamp-ordered event trace. Timestamps must be non-decreasing."""

    def __init__(self) -> None:
        self.events: List[Event] = []

    def append(self, t_us: int, kind: str, request_id: Optional[int] = None,
               **detail: Any) -> None:
        if self.events and t_us < self.events[-1].t_us:
            raise AssertionError(
                f"event log went backwards: {t_us} < {self.events[-1].t_us}")
        self.events.append(Event(t_us, kind, request_id, detail))

    def of_kind(self, kind: str) -> List[Event]:
        return [e for e in self.events if e.kind == kind]

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for event in self.events:
                fh.write(event.to_json())
                fh.write("\n")

    def __len__(self) -> int:
        return len(self.events)
