"""Planning: prompt construction, response parsing, candidate generation, updates and completion checks."""

from __future__ import annotations

import asyncio
import json
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal, Protocol

import structlog

from .errors import LlmError, MergeRejectedError, PlanningError, ResponseParseError, SnapshotParseError
from .graph import AgentRole, AovGraph, GraphMetrics, SelectionReport, select_candidate, validate
from .llm import CompletionRequest, LlmClient, Usage
from .state import (
    SubtaskRecord,
    SubtaskStatus,
    WorkflowState,
    WorkflowUpdate,
    canonical_task,
    is_task_entry,
    reject_duplicate_keys,
)

logger = structlog.get_logger(__name__)

PROMPTS_DIR = Path(__file__).parent / "prompts"
FIXTURES_DIR = Path(__file__).parent / "fixtures"
DEFAULT_CONTEXT_BUDGET = 24_000
MASK_SENTINEL = "none"

FORMAT_EXEMPLAR = """{
  "research": {
    "requirement": "Collect the facts the page must present",
    "status": "not_started",
    "data": null,
    "num_parents_not_completed": 0,
    "child": ["write"],
    "agent": "researcher"
  },
  "style": {
    "requirement": "Write the stylesheet",
    "status": "not_started",
    "data": null,
    "num_parents_not_completed": 0,
    "child": ["write"],
    "agent": "designer"
  },
  "write": {
    "requirement": "Write the page using the collected facts and the stylesheet",
    "status": "not_started",
    "data": null,
    "num_parents_not_completed": 2,
    "child": [],
    "agent": "writer"
  }
}
Return only the JSON object. Status values are "not_started", "in_progress", "completed" or "failed".
"subtask requirement" is accepted in place of "requirement" and "next" in place of "child"."""


@dataclass(frozen=True)
class TaskSpec:
    requirement: str
    constraints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.requirement.strip():
            raise ValueError("task requirement must not be empty")
        object.__setattr__(self, "constraints", tuple(self.constraints))


@dataclass(frozen=True)
class PlannerConfig:
    k: int = 3
    temperature: float = 0.7
    max_parse_retries: int = 2
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    verify_temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_parse_retries < 0:
            raise ValueError("max_parse_retries must be nonnegative")


@dataclass(frozen=True)
class Verdict:
    passed: bool
    rationale: str


@dataclass(frozen=True)
class PlannerResponse:
    kind: Literal["candidates", "update", "no_change", "verdict"]
    candidates: tuple[AovGraph, ...] = ()
    update: WorkflowUpdate | None = None
    verdict: Verdict | None = None


@dataclass
class InitialPlan:
    graph: AovGraph
    candidates: list[AovGraph | None]
    selection: SelectionReport
    failures: dict[int, str] = field(default_factory=dict)

    def to_document(self) -> dict[str, Any]:
        def _metrics(m: GraphMetrics | None) -> dict[str, Any] | None:
            return m.as_dict() if m is not None else None

        return {
            "winner": self.selection.index,
            "candidates": [
                {
                    "index": i,
                    "valid": self.selection.metrics[i] is not None,
                    "metrics": _metrics(self.selection.metrics[i]),
                    "reason": self.failures.get(i) or self.selection.dropped.get(i),
                }
                for i in range(len(self.candidates))
            ],
        }


class Planner(Protocol):
    """Text-level planning contract; implementations must tolerate concurrent calls."""

    @property
    def usage(self) -> Usage: ...

    async def draft(self, task: TaskSpec, config: PlannerConfig, index: int, feedback: str | None = None) -> str: ...

    async def revise(self, task: TaskSpec, state: WorkflowState, config: PlannerConfig, index: int) -> str: ...

    async def judge(self, task: TaskSpec, subtask_id: str, record: SubtaskRecord) -> str: ...


# -- prompts --


@lru_cache
def load_template(name: str, directory: Path = PROMPTS_DIR) -> str:
    """Read a prompt template; cached per directory."""
    return (directory / f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, **values: str) -> str:
    """Fill ``{{name}}`` placeholders."""
    for key, value in values.items():
        template = template.replace("{{" + key + "}}", value)
    return template


def build_init_prompt(task: TaskSpec, config: PlannerConfig, directory: Path = PROMPTS_DIR) -> str:
    """Prompt asking for one complete candidate workflow."""
    prompt = render(load_template("init", directory), task=task.requirement, format=FORMAT_EXEMPLAR)
    if task.constraints:
        prompt += "\n\nRole constraints:\n" + "\n".join(f"- {c}" for c in task.constraints)
    logger.debug("init prompt built", chars=len(prompt), k=config.k)
    return prompt


def serialize_state_for_prompt(state: WorkflowState, budget: int = DEFAULT_CONTEXT_BUDGET) -> str:
    """Serialized snapshot, truncating completed data oldest-first until it fits ``budget`` characters."""
    doc = state.to_document()
    text = json.dumps(doc, indent=2, ensure_ascii=False)
    for task_id in state.completion_order:
        if len(text) <= budget:
            break
        entry = doc["tasks"].get(task_id)
        if not entry or entry["data"] is None:
            continue
        entry["data"] = f"[truncated {len(entry['data'])} characters]"
        text = json.dumps(doc, indent=2, ensure_ascii=False)
    if len(text) > budget:
        logger.warning("state exceeds context budget after truncation", chars=len(text), budget=budget)
    return text


def build_update_prompt(
    task: TaskSpec, state: WorkflowState, budget: int = DEFAULT_CONTEXT_BUDGET, directory: Path = PROMPTS_DIR
) -> str:
    """Prompt asking for a revised workflow given the current snapshot."""
    prompt = render(
        load_template("update", directory),
        task=task.requirement,
        state=serialize_state_for_prompt(state, budget),
        format=FORMAT_EXEMPLAR,
    )
    if task.constraints:
        prompt += "\n\nRole constraints:\n" + "\n".join(f"- {c}" for c in task.constraints)
    return prompt


def build_verify_prompt(task: TaskSpec, subtask_id: str, record: SubtaskRecord, directory: Path = PROMPTS_DIR) -> str:
    """Prompt asking whether a subtask's output meets its requirement."""
    return render(
        load_template("verify", directory),
        task=task.requirement,
        subtask=subtask_id,
        requirement=record.requirement,
        output=record.data if record.data is not None else "(no output)",
    )


# -- response parsing --

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
_VERDICT = re.compile(r"^\W*(yes|no)\b[\s:;,.\-]*(.*)$", re.IGNORECASE | re.DOTALL)


def extract_json_object(text: str) -> dict[str, Any]:
    """Return the first JSON object in ``text``, looking inside code fences first."""
    decoder = json.JSONDecoder(object_pairs_hook=reject_duplicate_keys)
    sources = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    for source in sources:
        start = source.find("{")
        while start != -1:
            try:
                obj, _end = decoder.raw_decode(source, start)
            except json.JSONDecodeError:
                start = source.find("{", start + 1)
                continue
            except SnapshotParseError as exc:
                raise ResponseParseError(f"duplicate subtask id {exc.key!r}") from exc
            if isinstance(obj, dict):
                return obj
            start = source.find("{", start + 1)
    raise ResponseParseError("no JSON object found")


def _task_map(obj: dict[str, Any]) -> dict[str, Any]:
    """The task map of a full snapshot, or ``obj`` itself when it is already a bare task map."""
    inner = obj.get("tasks")
    if not isinstance(inner, dict) or is_task_entry(inner):
        return obj
    if any(is_task_entry(value) for key, value in obj.items() if key != "tasks"):
        return obj
    return inner


def parse_workflow_response(text: str, context: Literal["initial", "update"] = "initial") -> PlannerResponse:
    """Parse a planner answer into candidates (initial), an update, or no_change.

    Raises ``ResponseParseError`` whose diagnosis can be fed back to the planner.
    """
    obj = extract_json_object(text)
    if not obj:
        return PlannerResponse("no_change")

    tasks = _task_map(obj)
    try:
        parsed = {task_id: canonical_task(raw, task_id) for task_id, raw in tasks.items()}
    except SnapshotParseError as exc:
        raise ResponseParseError(f"schema violation: {exc}") from exc
    if not parsed:
        return PlannerResponse("no_change")

    for task_id, task in parsed.items():
        for child in task.children:
            if child not in parsed:
                raise ResponseParseError(f"schema violation: {task_id} lists unknown child {child!r}")

    graph = AovGraph(
        tuple(parsed),
        frozenset((u, c) for u, t in parsed.items() for c in t.children),
        {k: AgentRole(t.agent, t.persona) for k, t in parsed.items()},
        {k: t.requirement for k, t in parsed.items()},
    )
    report = validate(graph)
    if not report.ok:
        raise ResponseParseError("invalid structure: " + "; ".join(str(v) for v in report.violations))

    if context == "update":
        return PlannerResponse("update", update=WorkflowUpdate.from_tasks(parsed))
    return PlannerResponse("candidates", candidates=(graph,))


def parse_verdict(text: str) -> Verdict:
    """Read a leading YES/NO; anything else is accepted with a warning."""
    match = _VERDICT.match(text.strip())
    if match is None:
        logger.warning("verdict without leading YES/NO, accepting", text=text[:200])
        return Verdict(True, text.strip())
    rationale = match.group(2).strip() or match.group(1)
    return Verdict(match.group(1).lower() == "yes", rationale)


# -- planning operations --


async def _draft_candidate(
    planner: Planner, task: TaskSpec, config: PlannerConfig, index: int
) -> tuple[AovGraph | None, str | None]:
    """One candidate slot: request, parse, and re-request with feedback on parse errors."""
    feedback = None
    for attempt in range(config.max_parse_retries + 1):
        try:
            text = await planner.draft(task, config, index, feedback)
        except LlmError as exc:
            logger.warning("candidate request failed", index=index, error=str(exc))
            return None, f"planner error: {exc}"
        try:
            response = parse_workflow_response(text, "initial")
        except ResponseParseError as exc:
            logger.warning("candidate unparseable", index=index, attempt=attempt, diagnosis=exc.diagnosis)
            feedback = exc.diagnosis
            continue
        if response.kind != "candidates":
            feedback = "the workflow is empty; at least one sub-task is required"
            logger.warning("candidate empty", index=index, attempt=attempt)
            continue
        return response.candidates[0], None
    return None, feedback


async def plan_initial(planner: Planner, task: TaskSpec, config: PlannerConfig) -> InitialPlan:
    """Request K candidates independently, drop invalid ones and select the most modular."""
    results = await asyncio.gather(*(_draft_candidate(planner, task, config, i) for i in range(config.k)))
    candidates = [graph for graph, _reason in results]
    failures = {i: reason or "invalid" for i, (graph, reason) in enumerate(results) if graph is None}
    positions = [i for i, graph in enumerate(candidates) if graph is not None]
    if not positions:
        raise PlanningError(f"all {config.k} candidates were unusable: " + "; ".join(failures.values()))

    valid = [g for g in candidates if g is not None]
    report = select_candidate(valid)
    metrics: list[GraphMetrics | None] = [None] * len(candidates)
    for local, position in enumerate(positions):
        metrics[position] = report.metrics[local]
    dropped = dict(failures)
    dropped.update({positions[local]: reason for local, reason in report.dropped.items()})
    selection = SelectionReport(positions[report.index], tuple(metrics), dropped)
    logger.info("initial plan selected", winner=selection.index, candidates=len(candidates), dropped=len(dropped))
    return InitialPlan(valid[report.index], candidates, selection, failures)


async def propose_update(
    planner: Planner, task: TaskSpec, state: WorkflowState, config: PlannerConfig
) -> PlannerResponse:
    """Ask for K structural updates and keep the best successor, if it beats the current plan.

    A failed subtask blocks its descendants, and a failed sink blocks the
    workflow itself, so while any subtask is failed the current plan is not
    eligible and a repairing update wins whenever one is offered.
    """
    snapshot = state.snapshot()

    async def _one(index: int) -> PlannerResponse | None:
        try:
            return parse_workflow_response(await planner.revise(task, snapshot, config, index), "update")
        except ResponseParseError as exc:
            logger.warning("update unparseable", index=index, diagnosis=exc.diagnosis)
        except LlmError as exc:
            logger.warning("update request failed", index=index, error=str(exc))
        return None

    responses = await asyncio.gather(*(_one(i) for i in range(config.k)))
    if all(r is None for r in responses):
        logger.warning("no usable update responses, keeping current workflow", revision=state.revision)
        return PlannerResponse("no_change")

    successors: list[tuple[WorkflowUpdate, AovGraph]] = []
    for index, response in enumerate(responses):
        if response is None or response.update is None:
            continue
        try:
            merged = snapshot.merged(response.update)
        except MergeRejectedError as exc:
            logger.warning("update dropped", index=index, reason=str(exc))
            continue
        successors.append((response.update, merged.to_graph()))
    if not successors:
        return PlannerResponse("no_change")

    forced = bool(snapshot.ids_with_status(SubtaskStatus.FAILED))
    pool = [graph for _update, graph in successors]
    if not forced:
        pool.insert(0, snapshot.to_graph())
    report = select_candidate(pool)
    if not forced and report.index == 0:
        return PlannerResponse("no_change")
    winner = successors[report.index - (0 if forced else 1)][0]
    return PlannerResponse("update", update=winner)


async def verify_completion(planner: Planner, task: TaskSpec, subtask_id: str, record: SubtaskRecord) -> Verdict:
    """Ask the planner whether a provisionally completed subtask meets its requirement."""
    try:
        text = await planner.judge(task, subtask_id, record)
    except LlmError as exc:
        logger.warning("verification unavailable, accepting output", subtask=subtask_id, error=str(exc))
        return Verdict(True, f"verification unavailable: {exc}")
    return parse_verdict(text)


# -- planners --


def fixture_workflows() -> list[str]:
    """Snapshot texts of the shipped example workflows, in name order."""
    return [p.read_text(encoding="utf-8") for p in sorted((FIXTURES_DIR / "workflows").glob("*.json"))]


def repair_proposal(state: WorkflowState) -> dict[str, Any]:
    """Structural update that re-queues every failed subtask.

    A failed subtask with children also gets a review subtask bridging it to
    those children, so their inputs are checked before they run.
    """
    tasks: dict[str, dict[str, Any]] = {
        task_id: {
            "requirement": rec.requirement,
            "status": rec.status.value,
            "child": list(rec.children),
            "agent": rec.agent,
        }
        for task_id, rec in state.records.items()
    }
    for failed in state.ids_with_status(SubtaskStatus.FAILED):
        entry = tasks[failed]
        entry["status"] = SubtaskStatus.NOT_STARTED.value
        if not entry["child"]:
            continue
        review_id, n = f"{failed}_review", 1
        while review_id in tasks:
            n += 1
            review_id = f"{failed}_review_{n}"
        tasks[review_id] = {
            "requirement": f"Check and repair the output of {failed} before it is used: {entry['requirement']}",
            "status": SubtaskStatus.NOT_STARTED.value,
            "child": list(entry["child"]),
            "agent": entry["agent"],
        }
        entry["child"] = [*entry["child"], review_id]
    return tasks


class MockPlanner:
    """Deterministic planner driven by snapshot fixtures.

    ``draft`` serves fixtures round-robin by request index, ``revise`` answers
    with ``repair_proposal`` when something failed (otherwise ``{}``), and
    ``judge`` rejects missing output and the mask sentinel.
    """

    def __init__(self, fixtures: Sequence[str] | None = None):
        self.fixtures = list(fixtures) if fixtures is not None else fixture_workflows()
        if not self.fixtures:
            raise ValueError("mock planner needs at least one fixture")
        self.usage = Usage()

    async def draft(self, task: TaskSpec, config: PlannerConfig, index: int, feedback: str | None = None) -> str:
        return self.fixtures[index % len(self.fixtures)]

    async def revise(self, task: TaskSpec, state: WorkflowState, config: PlannerConfig, index: int) -> str:
        if not state.ids_with_status(SubtaskStatus.FAILED):
            return "{}"
        return json.dumps(repair_proposal(state), indent=2)

    async def judge(self, task: TaskSpec, subtask_id: str, record: SubtaskRecord) -> str:
        if record.data is None or record.data == MASK_SENTINEL:
            return "NO: the subtask produced no usable output"
        return "YES: output present"


class LlmPlanner:
    """Planner backed by an OpenAI-compatible chat model."""

    def __init__(self, client: LlmClient, prompts_dir: Path = PROMPTS_DIR):
        self.client = client
        self.prompts_dir = prompts_dir

    @property
    def usage(self) -> Usage:
        return self.client.usage

    async def _ask(self, prompt: str, temperature: float) -> str:
        """Single chat turn; returns the reply text."""
        completion = await self.client.complete(CompletionRequest.build(prompt, temperature=temperature))
        return completion.content

    async def draft(self, task: TaskSpec, config: PlannerConfig, index: int, feedback: str | None = None) -> str:
        prompt = build_init_prompt(task, config, self.prompts_dir)
        if feedback:
            prompt += f"\n\nYour previous answer could not be used ({feedback}). Return the corrected JSON object only."
        return await self._ask(prompt, config.temperature)

    async def revise(self, task: TaskSpec, state: WorkflowState, config: PlannerConfig, index: int) -> str:
        prompt = build_update_prompt(task, state, config.context_budget, self.prompts_dir)
        return await self._ask(prompt, config.temperature)

    async def judge(self, task: TaskSpec, subtask_id: str, record: SubtaskRecord) -> str:
        return await self._ask(build_verify_prompt(task, subtask_id, record, self.prompts_dir), 0.0)
