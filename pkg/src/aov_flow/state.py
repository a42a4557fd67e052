"""Runtime workflow state: one keyed record per subtask, JSON snapshots, and structural-update merging."""

from __future__ import annotations

import copy
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Literal

import networkx as nx
import structlog

from .errors import MergeRejectedError, SnapshotParseError, StateTransitionError, UnknownSubtaskError
from .graph import AgentRole, AovGraph, validate

logger = structlog.get_logger(__name__)


class SubtaskStatus(str, Enum):
    NOT_STARTED = "not_started"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


_TRANSITIONS: dict[SubtaskStatus, frozenset[SubtaskStatus]] = {
    SubtaskStatus.NOT_STARTED: frozenset({SubtaskStatus.IN_PROGRESS}),
    SubtaskStatus.IN_PROGRESS: frozenset({SubtaskStatus.COMPLETED, SubtaskStatus.FAILED}),
    SubtaskStatus.COMPLETED: frozenset(),
    SubtaskStatus.FAILED: frozenset({SubtaskStatus.NOT_STARTED}),
}

# Status spellings planners emit in place of the canonical tokens.
_STATUS_ALIASES = {
    "not_started": SubtaskStatus.NOT_STARTED,
    "pending": SubtaskStatus.NOT_STARTED,
    "in_progress": SubtaskStatus.IN_PROGRESS,
    "completed": SubtaskStatus.COMPLETED,
    "failed": SubtaskStatus.FAILED,
}

_REQUIREMENT_KEYS = ("requirement", "subtask requirement", "subtask_requirement")
_CHILD_KEYS = ("child", "children", "next")


def parse_status(token: Any, key: str) -> SubtaskStatus:
    """Map a status spelling to its canonical token."""
    if token is None:
        return SubtaskStatus.NOT_STARTED
    if not isinstance(token, str):
        raise SnapshotParseError(f"status must be a string, got {type(token).__name__}", key)
    normalized = token.strip().lower().replace(" ", "_").replace("-", "_")
    try:
        return _STATUS_ALIASES[normalized]
    except KeyError:
        raise SnapshotParseError(f"unknown status token {token!r}", key) from None


@dataclass
class CanonicalTask:
    """One task entry after the key shim has been applied."""

    requirement: str
    status: SubtaskStatus
    data: str | None
    counter: int | None
    children: list[str]
    agent: str
    persona: str = ""


def canonical_task(raw: Any, task_id: str) -> CanonicalTask:
    """Apply the loader shim to one task entry.

    Accepts the spaced ``"subtask requirement"`` key, ``next``/``children`` as
    aliases for ``child``, and an agent given either as a name or as
    ``{"name", "persona"}``. ``prev`` is derivable and ignored.
    """
    if not isinstance(raw, dict):
        raise SnapshotParseError("task entry must be an object", task_id)

    requirement = next((raw[k] for k in _REQUIREMENT_KEYS if k in raw), None)
    if not isinstance(requirement, str) or not requirement.strip():
        raise SnapshotParseError("missing or empty requirement", f"{task_id}.requirement")

    children_raw = next((raw[k] for k in _CHILD_KEYS if k in raw), [])
    if children_raw is None:
        children_raw = []
    if isinstance(children_raw, str):
        children_raw = [children_raw]
    if not isinstance(children_raw, list) or not all(isinstance(c, str) for c in children_raw):
        raise SnapshotParseError("child must be a list of subtask ids", f"{task_id}.child")
    children = list(dict.fromkeys(children_raw))

    agent_raw = raw.get("agent")
    persona = ""
    if isinstance(agent_raw, dict):
        persona = str(agent_raw.get("persona") or "")
        agent_raw = agent_raw.get("name")
    if not isinstance(agent_raw, str) or not agent_raw.strip():
        raise SnapshotParseError("missing agent", f"{task_id}.agent")

    data = raw.get("data")
    if data is not None and not isinstance(data, str):
        data = json.dumps(data, ensure_ascii=False)

    counter = raw.get("num_parents_not_completed")
    if counter is not None and (not isinstance(counter, int) or isinstance(counter, bool)):
        raise SnapshotParseError("num_parents_not_completed must be an integer", f"{task_id}.num_parents_not_completed")

    return CanonicalTask(
        requirement=requirement,
        status=parse_status(raw.get("status"), f"{task_id}.status"),
        data=data,
        counter=counter,
        children=children,
        agent=agent_raw,
        persona=persona,
    )


def is_task_entry(raw: Any) -> bool:
    """Whether ``raw`` looks like one subtask record rather than a map of them."""
    return isinstance(raw, dict) and any(k in raw for k in _REQUIREMENT_KEYS)


def reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    """``object_pairs_hook`` that refuses repeated keys (duplicate subtask ids)."""
    result: dict[str, Any] = {}
    for key, value in pairs:
        if key in result:
            raise SnapshotParseError("duplicate key", key)
        result[key] = value
    return result


@dataclass
class SubtaskRecord:
    requirement: str
    agent: str
    status: SubtaskStatus = SubtaskStatus.NOT_STARTED
    data: str | None = None
    num_parents_not_completed: int = 0
    children: list[str] = field(default_factory=list)

    def to_document(self) -> dict[str, Any]:
        return {
            "requirement": self.requirement,
            "status": self.status.value,
            "data": self.data,
            "num_parents_not_completed": self.num_parents_not_completed,
            "child": list(self.children),
            "agent": self.agent,
        }


@dataclass(frozen=True)
class StateNote:
    """Diagnostics that belong in the run log rather than in the snapshot."""

    kind: Literal["failed", "retired", "reset"]
    subtask: str
    detail: str


@dataclass
class ProposedTask:
    requirement: str
    agent: str
    children: list[str] = field(default_factory=list)
    status: SubtaskStatus = SubtaskStatus.NOT_STARTED


@dataclass
class WorkflowUpdate:
    """A structural update without data payloads; an empty update means "no change"."""

    tasks: dict[str, ProposedTask] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.tasks

    @classmethod
    def from_tasks(cls, tasks: Mapping[str, CanonicalTask]) -> WorkflowUpdate:
        proposed = {
            task_id: ProposedTask(t.requirement, t.agent, list(t.children), t.status) for task_id, t in tasks.items()
        }
        roles = {t.agent: t.persona for t in tasks.values() if t.persona}
        return cls(proposed, roles)

    def to_document(self) -> dict[str, Any]:
        return {
            task_id: {"requirement": t.requirement, "status": t.status.value, "child": t.children, "agent": t.agent}
            for task_id, t in self.tasks.items()
        }


def _structure_graph(
    requirements: Mapping[str, str], children: Mapping[str, Iterable[str]], agents: Mapping[str, str]
) -> AovGraph:
    edges = {(u, c) for u, kids in children.items() for c in kids}
    return AovGraph(
        tuple(requirements),
        frozenset(edges),
        {k: AgentRole(a) for k, a in agents.items()},
        requirements,
    )


@dataclass
class WorkflowState:
    """The keyed runtime record of a workflow.

    Mutated only by the coordinator. ``notes`` and ``completion_order`` are
    runtime bookkeeping and are excluded from equality and snapshots.
    """

    records: dict[str, SubtaskRecord]
    goal: str = ""
    revision: int = 0
    roles: dict[str, str] = field(default_factory=dict)
    notes: list[StateNote] = field(default_factory=list, compare=False)
    completion_order: list[str] = field(default_factory=list, compare=False)

    @classmethod
    def from_graph(cls, graph: AovGraph, goal: str = "") -> WorkflowState:
        """Fresh state for ``graph`` with every subtask not started."""
        validate(graph).raise_for_violations()
        records = {
            vertex: SubtaskRecord(
                requirement=graph.requirement_of[vertex],
                agent=graph.agent_of[vertex].name,
                num_parents_not_completed=len(graph.parents(vertex)),
                children=graph.children(vertex),
            )
            for vertex in graph.vertices
        }
        roles = {r.name: r.persona for r in graph.agent_of.values() if r.persona}
        return cls(records, goal=goal, roles=roles)

    # -- queries --

    def __contains__(self, task_id: object) -> bool:
        return task_id in self.records

    def record(self, task_id: str) -> SubtaskRecord:
        """The record for ``task_id``; raises ``UnknownSubtaskError``."""
        try:
            return self.records[task_id]
        except KeyError:
            raise UnknownSubtaskError(task_id) from None

    def parents_of(self) -> dict[str, list[str]]:
        """Parent lists derived from the child lists."""
        parents: dict[str, list[str]] = {task_id: [] for task_id in self.records}
        for task_id, rec in self.records.items():
            for child in rec.children:
                parents[child].append(task_id)
        return parents

    def ready_set(self) -> set[str]:
        """Not-started subtasks whose parents have all completed."""
        return {
            task_id
            for task_id, rec in self.records.items()
            if rec.status is SubtaskStatus.NOT_STARTED and rec.num_parents_not_completed == 0
        }

    def ids_with_status(self, status: SubtaskStatus) -> list[str]:
        return [task_id for task_id, rec in self.records.items() if rec.status is status]

    @property
    def is_complete(self) -> bool:
        return all(rec.status is SubtaskStatus.COMPLETED for rec in self.records.values())

    def blocking_failures(self) -> list[str]:
        """Failed subtasks that hold back at least one descendant."""
        return [
            task_id
            for task_id, rec in self.records.items()
            if rec.status is SubtaskStatus.FAILED and rec.children
        ]

    def expected_counters(self) -> dict[str, int]:
        """Pending-parent counts recomputed from statuses."""
        counters = dict.fromkeys(self.records, 0)
        for rec in self.records.values():
            if rec.status is not SubtaskStatus.COMPLETED:
                for child in rec.children:
                    counters[child] += 1
        return counters

    def check_consistency(self) -> list[str]:
        """Return every invariant violation; empty when the state is consistent."""
        problems = []
        for task_id, rec in self.records.items():
            for child in rec.children:
                if child not in self.records:
                    problems.append(f"{task_id}: dangling child {child}")
        if problems:
            return problems
        for task_id, expected in self.expected_counters().items():
            actual = self.records[task_id].num_parents_not_completed
            if actual != expected:
                problems.append(f"{task_id}: counter {actual} != {expected}")
        for task_id, rec in self.records.items():
            if (rec.data is not None) != (rec.status is SubtaskStatus.COMPLETED):
                problems.append(f"{task_id}: data present iff completed violated")
        report = validate(self.to_graph())
        problems.extend(str(v) for v in report.of_kind("cycle"))
        return problems

    def to_graph(self) -> AovGraph:
        return AovGraph(
            tuple(self.records),
            frozenset((u, c) for u, rec in self.records.items() for c in rec.children),
            {k: AgentRole(rec.agent, self.roles.get(rec.agent, "")) for k, rec in self.records.items()},
            {k: rec.requirement for k, rec in self.records.items()},
        )

    def snapshot(self) -> WorkflowState:
        """Deep copy for consistent reads while the coordinator keeps mutating."""
        return copy.deepcopy(self)

    # -- transitions --

    def _transition(self, task_id: str, target: SubtaskStatus) -> SubtaskRecord:
        rec = self.record(task_id)
        if target not in _TRANSITIONS[rec.status]:
            raise StateTransitionError(f"{task_id}: {rec.status.value} -> {target.value} is not allowed")
        rec.status = target
        return rec

    def mark_in_progress(self, task_id: str) -> WorkflowState:
        self._transition(task_id, SubtaskStatus.IN_PROGRESS)
        return self

    def mark_completed(self, task_id: str, output: str) -> WorkflowState:
        """Store the output and release each child's counter."""
        rec = self._transition(task_id, SubtaskStatus.COMPLETED)
        rec.data = output
        for child in rec.children:
            child_rec = self.records[child]
            if child_rec.num_parents_not_completed == 0:
                logger.error("counter underflow", subtask=child, parent=task_id)
                continue
            child_rec.num_parents_not_completed -= 1
        self.completion_order.append(task_id)
        return self

    def mark_failed(self, task_id: str, reason: str) -> WorkflowState:
        self._transition(task_id, SubtaskStatus.FAILED)
        self.notes.append(StateNote("failed", task_id, reason))
        return self

    def requeue(self, task_id: str) -> WorkflowState:
        self._transition(task_id, SubtaskStatus.NOT_STARTED)
        return self

    def drain_notes(self) -> list[StateNote]:
        """Hand over the pending run-log notes and clear them."""
        notes, self.notes = self.notes, []
        return notes

    # -- structural updates --

    def merge_update(self, update: WorkflowUpdate) -> WorkflowState:
        """Merge ``update`` into a new state; on rejection log and return ``self`` unchanged."""
        try:
            return self.merged(update)
        except MergeRejectedError as exc:
            logger.error("merge rejected", revision=self.revision, reason=str(exc))
            return self

    def merged(self, update: WorkflowUpdate) -> WorkflowState:
        """Like ``merge_update`` but raises ``MergeRejectedError``."""
        if update.is_empty:
            return self

        proposed = update.tasks
        for task_id, task in proposed.items():
            for child in task.children:
                if child not in proposed:
                    raise MergeRejectedError(f"{task_id}: child {child} is not part of the proposal")
        report = validate(
            _structure_graph(
                {k: t.requirement for k, t in proposed.items()},
                {k: t.children for k, t in proposed.items()},
                {k: t.agent for k, t in proposed.items()},
            )
        )
        if not report.ok:
            raise MergeRejectedError("; ".join(str(v) for v in report.violations))

        notes = list(self.notes)
        records: dict[str, SubtaskRecord] = {}
        for task_id, task in proposed.items():
            current = self.records.get(task_id)
            status, data = SubtaskStatus.NOT_STARTED, None
            if current is not None:
                if current.requirement != task.requirement:
                    if current.data is not None:
                        notes.append(StateNote("reset", task_id, current.data))
                elif current.status is SubtaskStatus.FAILED:
                    requeued = task.status is SubtaskStatus.NOT_STARTED
                    status = SubtaskStatus.NOT_STARTED if requeued else SubtaskStatus.FAILED
                else:
                    status, data = current.status, current.data
            records[task_id] = SubtaskRecord(
                requirement=task.requirement,
                agent=task.agent,
                status=status,
                data=data,
                children=list(task.children),
            )

        for task_id, current in self.records.items():
            if task_id not in proposed and current.data is not None:
                notes.append(StateNote("retired", task_id, current.data))

        merged = WorkflowState(
            records,
            goal=self.goal,
            revision=self.revision + 1,
            roles={**self.roles, **update.roles},
            notes=notes,
            completion_order=[
                t for t in self.completion_order if t in records and records[t].status is SubtaskStatus.COMPLETED
            ],
        )
        merged.recompute_counters()
        return merged

    def recompute_counters(self) -> dict[str, tuple[int, int]]:
        """Reset every counter from the children lists; returns ``{id: (old, new)}`` for corrections."""
        corrections = {}
        for task_id, expected in self.expected_counters().items():
            rec = self.records[task_id]
            if rec.num_parents_not_completed != expected:
                corrections[task_id] = (rec.num_parents_not_completed, expected)
                rec.num_parents_not_completed = expected
        return corrections

    # -- serialization --

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "goal": self.goal,
            "revision": self.revision,
            "tasks": {task_id: rec.to_document() for task_id, rec in self.records.items()},
        }
        if self.roles:
            doc["roles"] = dict(self.roles)
        return doc

    def to_json(self) -> str:
        """Snapshot JSON as written to ``workflow.json`` and ``final.json``."""
        return json.dumps(self.to_document(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_document(cls, doc: Any) -> WorkflowState:
        """Load a decoded snapshot, applying the key shim and correcting stale counters."""
        if not isinstance(doc, dict):
            raise SnapshotParseError("snapshot must be a JSON object")
        tasks = doc.get("tasks")
        if not isinstance(tasks, dict):
            raise SnapshotParseError("missing task map", "tasks")
        goal = doc.get("goal", "")
        if not isinstance(goal, str):
            raise SnapshotParseError("goal must be text", "goal")
        revision = doc.get("revision", 0)
        if not isinstance(revision, int) or isinstance(revision, bool) or revision < 0:
            raise SnapshotParseError("revision must be a nonnegative integer", "revision")
        roles_raw = doc.get("roles", {})
        if not isinstance(roles_raw, dict):
            raise SnapshotParseError("roles must be an object", "roles")

        parsed = {task_id: canonical_task(raw, task_id) for task_id, raw in tasks.items()}
        for task_id, task in parsed.items():
            for child in task.children:
                if child not in parsed:
                    raise SnapshotParseError(f"dangling child {child!r}", f"{task_id}.child")

        roles = {str(k): str(v) for k, v in roles_raw.items() if v}
        roles.update({t.agent: t.persona for t in parsed.values() if t.persona})
        records = {}
        for task_id, task in parsed.items():
            data = task.data
            if data is not None and task.status is not SubtaskStatus.COMPLETED:
                logger.warning("dropping data of non-completed subtask", subtask=task_id, status=task.status.value)
                data = None
            records[task_id] = SubtaskRecord(
                requirement=task.requirement,
                agent=task.agent,
                status=task.status,
                data=data,
                num_parents_not_completed=task.counter or 0,
                children=task.children,
            )

        state = cls(records, goal=goal, revision=revision, roles=roles)
        graph = nx.DiGraph((u, c) for u, rec in records.items() for c in rec.children)
        if not nx.is_directed_acyclic_graph(graph):
            cycle = [u for u, _v in nx.find_cycle(graph)]
            raise SnapshotParseError("cycle " + " -> ".join([*cycle, cycle[0]]), cycle[0])

        for task_id, (old, new) in state.recompute_counters().items():
            if parsed[task_id].counter is not None:
                logger.warning("counter corrected", subtask=task_id, document=old, recomputed=new)
        state.completion_order = state.ids_with_status(SubtaskStatus.COMPLETED)
        return state

    @classmethod
    def from_json(cls, text: str) -> WorkflowState:
        """Load snapshot text; duplicate subtask ids are rejected."""
        try:
            doc = json.loads(text, object_pairs_hook=reject_duplicate_keys)
        except json.JSONDecodeError as exc:
            raise SnapshotParseError(f"malformed JSON: {exc.msg} at line {exc.lineno}") from exc
        return cls.from_document(doc)
