"""Ordered event log of one question solve, written as JSON Lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

TRACE_SCHEMA = "treerag.trace/1"

EVENT_KINDS = frozenset(
    {
        "analyze",
        "decompose",
        "consensus_pick",
        "retrieve",
        "leaf_answer",
        "none_convert",
        "support_check",
        "rewrite",
        "substitute",
        "aggregate",
        "refine",
    }
)


@dataclass
class Event:
    kind: str
    node_id: str | None
    payload: dict

    def to_dict(self, seq: int) -> dict:
        return {"seq": seq, "kind": self.kind, "node": self.node_id, "payload": self.payload}


@dataclass
class SolveTrace:
    question: str = ""
    events: list[Event] = field(default_factory=list)
    final_answer: str | None = None
    rounds_used: int = 0
    final_tree: dict | None = None
    status: str = ""
    round: int = 1

    def add(self, kind: str, node_id: str | None = None, **payload) -> Event:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown trace event kind {kind!r}")
        payload.setdefault("round", self.round)
        event = Event(kind, node_id, payload)
        self.events.append(event)
        return event

    def extend(self, events: list[Event]) -> None:
        self.events.extend(events)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def header(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "question": self.question,
            "final_answer": self.final_answer,
            "rounds_used": self.rounds_used,
            "status": self.status,
            "final_tree": self.final_tree,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), ensure_ascii=False, sort_keys=True)]
        lines += [json.dumps(e.to_dict(i), ensure_ascii=False, sort_keys=True) for i, e in enumerate(self.events)]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "SolveTrace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        if head.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"{path}: unsupported trace schema {head.get('schema')!r}")
        trace = cls(head["question"], [], head["final_answer"], head["rounds_used"], head["final_tree"],
                    head.get("status", ""))
        for line in lines[1:]:
            rec = json.loads(line)
            trace.events.append(Event(rec["kind"], rec["node"], rec["payload"]))
        return trace


def reasoning_steps(trace: SolveTrace) -> list[str]:
    """Readable reasoning chain of the last round.

    Includes solve-time decomposition attempts, successful leaf answers,
    placeholder substitutions and aggregations. Failed lookups and
    conversions are left out; they appear as their own events.
    """
    last = trace.rounds_used or trace.round
    steps = []
    for e in trace.events:
        p = e.payload
        if p.get("round") != last:
            continue
        if e.kind == "decompose" and p.get("phase") == "solve" and "pattern" in p:
            if p.get("pattern") == "direct":
                steps.append(f"Attempt to decompose {e.node_id} -> leaf node")
            else:
                steps.append(f"Decompose {e.node_id} -> {p.get('pattern')} ({', '.join(p.get('children', []))})")
        elif e.kind == "leaf_answer" and p.get("answer") is not None:
            steps.append(f"Retrieve answer for {e.node_id} -> {p['answer']}")
        elif e.kind == "substitute":
            steps.append(f"{e.node_id} becomes: {p['question']}")
        elif e.kind == "aggregate" and p.get("answer") is not None:
            target = "original question" if p.get("is_root") else e.node_id
            steps.append(f"Aggregate {' and '.join(p['children'])} to answer {target} -> {p['answer']}")
    return steps
