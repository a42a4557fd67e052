"""Append-only JSONL run log and its safety audit."""

from __future__ import annotations

import json
from collections.abc import Iterable
from datetime import UTC, datetime
from pathlib import Path
from typing import Literal, TypedDict

import structlog

logger = structlog.get_logger(__name__)

EventToken = Literal[
    "planned",
    "selected",
    "dispatched",
    "completed",
    "verified",
    "verify_failed",
    "failed",
    "masked",
    "update_proposed",
    "update_merged",
    "no_change",
    "retired",
    "reset",
    "stale_result",
    "budget_exhausted",
    "done",
]


class RunEvent(TypedDict):
    ts: str
    revision: int
    event: EventToken
    subtask: str | None
    agent: str | None
    detail: str


class RunLog:
    """Run events kept in memory and, when ``path`` is given, appended to a JSONL file."""

    def __init__(self, path: Path | None = None):
        self.path = path
        self.events: list[RunEvent] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def append(
        self,
        event: EventToken,
        revision: int,
        subtask: str | None = None,
        agent: str | None = None,
        detail: str = "",
    ) -> RunEvent:
        entry: RunEvent = {
            "ts": datetime.now(UTC).isoformat(),
            "revision": revision,
            "event": event,
            "subtask": subtask,
            "agent": agent,
            "detail": detail,
        }
        self.events.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return entry

    def __len__(self) -> int:
        return len(self.events)

    def tokens(self) -> list[str]:
        return [e["event"] for e in self.events]


def load_run_log(path: Path) -> list[RunEvent]:
    """Load run events, skipping corrupt lines."""
    if not path.exists():
        return []

    entries: list[RunEvent] = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError:
            logger.warning("skipping corrupt run log line", path=str(path), line=number)
    return entries


def audit_run_log(events: Iterable[RunEvent], parents: dict[str, list[str]]) -> list[str]:
    """Return dispatch-safety violations found in ``events``.

    ``parents`` maps each subtask to its parents in the final workflow. A
    subtask may be dispatched only after the last completion of each of its
    parents, and not twice within one revision unless it failed in between.
    A merged update that resets a running subtask allows one more dispatch;
    a retired or reset subtask no longer counts as completed.
    """
    completed: set[str] = set()
    live: dict[str, int] = {}
    problems: list[str] = []
    for index, event in enumerate(events):
        subtask = event["subtask"]
        if subtask is None:
            continue
        kind = event["event"]
        if kind == "dispatched":
            if live.get(subtask) == event["revision"]:
                problems.append(f"event {index}: {subtask} dispatched twice")
            missing = [p for p in parents.get(subtask, []) if p not in completed]
            if missing:
                problems.append(f"event {index}: {subtask} dispatched before {', '.join(missing)} completed")
            live[subtask] = event["revision"]
        elif kind == "completed":
            completed.add(subtask)
            live.pop(subtask, None)
        elif kind == "failed":
            live.pop(subtask, None)
            completed.discard(subtask)
        elif kind in ("retired", "reset"):
            completed.discard(subtask)
    return problems


def dispatch_counts(events: Iterable[RunEvent]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for event in events:
        if event["event"] == "dispatched" and event["subtask"] is not None:
            counts[event["subtask"]] = counts.get(event["subtask"], 0) + 1
    return counts
