"""The run loop: concurrent dispatch of ready subtasks, verification, fault injection and refinement."""

from __future__ import annotations

import asyncio
import hashlib
import itertools
import json
import time
from collections.abc import Callable, Collection, Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Protocol

import numpy as np
import structlog

from .errors import LlmError, LlmTransportError, PlanningError
from .graph import AgentRole
from .llm import CompletionRequest, LlmClient, Usage
from .planner import (
    MASK_SENTINEL,
    PROMPTS_DIR,
    InitialPlan,
    Planner,
    PlannerConfig,
    PlannerResponse,
    TaskSpec,
    Verdict,
    load_template,
    plan_initial,
    propose_update,
    render,
    verify_completion,
)
from .runlog import EventToken, RunEvent, RunLog
from .state import SubtaskRecord, SubtaskStatus, WorkflowState

logger = structlog.get_logger(__name__)

Strategy = Literal["concurrent_update", "batch_update"]
UpdateTrigger = Literal["on_completion", "on_failure"]
Outcome = Literal["success", "failure", "budget_exhausted"]

STRATEGIES: tuple[Strategy, ...] = ("concurrent_update", "batch_update")
UPDATE_TRIGGERS: tuple[UpdateTrigger, ...] = ("on_completion", "on_failure")

# Parent id to that parent's output.
Upstream = Mapping[str, str]


@dataclass(frozen=True)
class AgentInstance:
    role: AgentRole
    clone_index: int = 0

    @property
    def label(self) -> str:
        """Instance name as written to the run log, e.g. ``writer#1``."""
        return f"{self.role.name}#{self.clone_index}"


@dataclass(frozen=True)
class ExecutorConfig:
    strategy: Strategy = "batch_update"
    max_concurrent: int = 8
    max_refinement_rounds: int = 10
    verify_completions: bool = True
    update_trigger: UpdateTrigger = "on_completion"

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.update_trigger not in UPDATE_TRIGGERS:
            raise ValueError(f"unknown update trigger {self.update_trigger!r}")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be at least 1")
        if self.max_refinement_rounds < 0:
            raise ValueError("max_refinement_rounds must be nonnegative")


class FaultInjector:
    """Replaces subtask outputs with a sentinel, deterministically per ``(seed, subtask id)``.

    Only a subtask's first execution attempt is masked.
    """

    def __init__(
        self,
        mask_ids: Iterable[str] = (),
        mask_probability: float = 0.0,
        sentinel: str = MASK_SENTINEL,
        seed: int = 0,
    ):
        if not 0.0 <= mask_probability <= 1.0:
            raise ValueError("mask_probability must be in [0, 1]")
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.mask_ids = frozenset(mask_ids)
        self.mask_probability = mask_probability
        self.sentinel = sentinel
        self.seed = seed

    def _draw(self, task_id: str) -> float:
        key = int.from_bytes(hashlib.sha256(task_id.encode("utf-8")).digest()[:8], "big")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, key])))
        return float(rng.random())

    def masks(self, task_id: str, attempt: int = 0) -> bool:
        """Whether this attempt's output is replaced by the sentinel."""
        if attempt > 0:
            return False
        if task_id in self.mask_ids:
            return True
        return self.mask_probability > 0.0 and self._draw(task_id) < self.mask_probability

    def inject(self, task_id: str, output: str, attempt: int = 0) -> str:
        return self.sentinel if self.masks(task_id, attempt) else output


@dataclass
class RunReport:
    final_state: WorkflowState | None
    outcome: Outcome
    events: list[RunEvent]
    refinement_rounds_used: int = 0
    wall_time: float = 0.0
    token_usage: dict[str, int] = field(default_factory=dict)
    error: str | None = None

    @property
    def subtasks_run(self) -> int:
        return sum(1 for e in self.events if e["event"] == "dispatched")

    def to_document(self) -> dict[str, Any]:
        """The ``report.json`` document."""
        statuses: dict[str, int] = {}
        if self.final_state is not None:
            for rec in self.final_state.records.values():
                statuses[rec.status.value] = statuses.get(rec.status.value, 0) + 1
        return {
            "outcome": self.outcome,
            "error": self.error,
            "refinement_rounds_used": self.refinement_rounds_used,
            "wall_time": round(self.wall_time, 6),
            "token_usage": self.token_usage,
            "subtasks_run": self.subtasks_run,
            "events": len(self.events),
            "revision": self.final_state.revision if self.final_state is not None else None,
            "statuses": statuses,
        }


# -- agents --


def allocate_agents(
    ready: Collection[str], state: WorkflowState, busy: Iterable[AgentInstance] = ()
) -> dict[str, AgentInstance]:
    """Give every ready subtask an agent instance, cloning roles shared within the set.

    Clone indices are handed out in id order and skip instances in ``busy``.
    Subtasks without a role are left out of the result.
    """
    taken = {(i.role.name, i.clone_index) for i in busy}
    assignments: dict[str, AgentInstance] = {}
    for task_id in sorted(ready):
        name = state.record(task_id).agent
        if not name.strip():
            logger.error("no agent role", subtask=task_id)
            continue
        index = 0
        while (name, index) in taken:
            index += 1
        taken.add((name, index))
        assignments[task_id] = AgentInstance(AgentRole(name, state.roles.get(name, "")), index)
    return assignments


def upstream_digest(upstream: Mapping[str, str]) -> str:
    """Short hash of the parent payloads, independent of dict order."""
    h = hashlib.sha256()
    for parent in sorted(upstream):
        payload = upstream[parent].encode("utf-8")
        h.update(f"{parent}:{len(payload)}:".encode())
        h.update(payload)
    return h.hexdigest()[:12]


def format_upstream(upstream: Mapping[str, str]) -> str:
    if not upstream:
        return "(none)"
    return "\n\n".join(f"[{parent}]\n{upstream[parent]}" for parent in sorted(upstream))


def build_agent_prompt(
    task_id: str, record: SubtaskRecord, upstream: Mapping[str, str], directory: Path = PROMPTS_DIR
) -> str:
    """Worker prompt: the subtask requirement followed by its parents' outputs."""
    return render(
        load_template("agent", directory),
        subtask=task_id,
        requirement=record.requirement,
        upstream=format_upstream(upstream),
    )


class AgentBackend(Protocol):
    @property
    def usage(self) -> Usage: ...

    async def run(self, instance: AgentInstance, task_id: str, record: SubtaskRecord, upstream: Upstream) -> str: ...


class StubBackend:
    """Deterministic agents: ``done(<id>)`` plus a digest of the upstream payloads."""

    def __init__(self, latency: float = 0.0, fail_ids: Iterable[str] = ()):
        self.latency = latency
        self.fail_ids = frozenset(fail_ids)
        self.usage = Usage()

    async def run(self, instance: AgentInstance, task_id: str, record: SubtaskRecord, upstream: Upstream) -> str:
        if self.latency > 0:
            await asyncio.sleep(self.latency)
        if task_id in self.fail_ids:
            raise LlmTransportError(f"stub agent unavailable for {task_id}")
        if not upstream:
            return f"done({task_id})"
        return f"done({task_id}) upstream={upstream_digest(upstream)}"


class LlmBackend:
    def __init__(self, client: LlmClient, temperature: float = 0.7, prompts_dir: Path = PROMPTS_DIR):
        self.client = client
        self.temperature = temperature
        self.prompts_dir = prompts_dir

    @property
    def usage(self) -> Usage:
        return self.client.usage

    async def run(self, instance: AgentInstance, task_id: str, record: SubtaskRecord, upstream: Upstream) -> str:
        request = CompletionRequest.build(
            build_agent_prompt(task_id, record, upstream, self.prompts_dir),
            persona=instance.role.persona,
            temperature=self.temperature,
        )
        completion = await self.client.complete(request)
        return completion.content


async def execute_subtask(
    backend: AgentBackend,
    instance: AgentInstance,
    task_id: str,
    record: SubtaskRecord,
    upstream: Mapping[str, str],
) -> str:
    """Run one subtask on its agent instance and return the raw output."""
    logger.debug("executing subtask", subtask=task_id, agent=instance.label, parents=len(upstream))
    return await backend.run(instance, task_id, record, upstream)


# -- coordinator --


@dataclass(frozen=True)
class _Dispatch:
    task_id: str
    token: int
    instance: AgentInstance
    attempt: int


@dataclass(frozen=True)
class _Result:
    dispatch: _Dispatch
    output: str | None = None
    error: str | None = None
    masked: bool = False
    verdict: Verdict | None = None


class _Coordinator:
    """Owns the workflow state and the run log; every transition goes through here."""

    def __init__(
        self,
        task: TaskSpec,
        planner: Planner,
        backend: AgentBackend,
        config: ExecutorConfig,
        planner_config: PlannerConfig,
        injector: FaultInjector | None,
        log: RunLog,
        state: WorkflowState,
    ):
        self.task = task
        self.planner = planner
        self.backend = backend
        self.config = config
        self.planner_config = planner_config
        self.injector = injector
        self.log = log
        self.state = state
        self.rounds = 0
        self.exhausted = False
        self.inflight: dict[str, int] = {}
        self.busy: dict[str, AgentInstance] = {}
        self.attempts: dict[str, int] = {}
        self.workers: dict[asyncio.Task[_Result], _Dispatch] = {}
        self._tokens = itertools.count(1)

    def emit(self, event: EventToken, subtask: str | None = None, agent: str | None = None, detail: str = "") -> None:
        """Append one event at the current revision."""
        self.log.append(event, self.state.revision, subtask, agent, detail)

    # -- dispatch --

    def dispatch_ready(self) -> list[asyncio.Task[_Result]]:
        """Start ready subtasks up to the concurrency cap and return their worker tasks."""
        capacity = self.config.max_concurrent - len(self.inflight)
        ready = sorted(self.state.ready_set())[: max(capacity, 0)]
        if not ready:
            return []
        instances = allocate_agents(ready, self.state, self.busy.values())
        parents = self.state.parents_of()
        started = []
        for task_id in ready:
            self.state.mark_in_progress(task_id)
            instance = instances.get(task_id)
            if instance is None:
                self.state.mark_failed(task_id, "no agent role")
                self.state.drain_notes()
                self.emit("failed", task_id, detail="no agent role")
                continue
            attempt = self.attempts.get(task_id, 0)
            self.attempts[task_id] = attempt + 1
            dispatch = _Dispatch(task_id, next(self._tokens), instance, attempt)
            self.inflight[task_id] = dispatch.token
            self.busy[task_id] = instance
            self.emit("dispatched", task_id, instance.label, f"attempt {attempt + 1}")

            record = replace(self.state.records[task_id], children=list(self.state.records[task_id].children))
            upstream = {p: self.state.records[p].data or "" for p in sorted(parents[task_id])}
            worker = asyncio.create_task(self.work(dispatch, record, upstream), name=f"subtask-{task_id}")
            self.workers[worker] = dispatch
            started.append(worker)
        return started

    async def work(self, dispatch: _Dispatch, record: SubtaskRecord, upstream: Mapping[str, str]) -> _Result:
        """Agent call plus masking and verification; leaves the state alone."""
        try:
            output = await execute_subtask(self.backend, dispatch.instance, dispatch.task_id, record, upstream)
        except LlmError as exc:
            return _Result(dispatch, error=f"agent error: {exc}")

        masked = self.injector is not None and self.injector.masks(dispatch.task_id, dispatch.attempt)
        if masked and self.injector is not None:
            output = self.injector.sentinel

        verdict = None
        if self.config.verify_completions:
            provisional = replace(record, status=SubtaskStatus.COMPLETED, data=output)
            verdict = await verify_completion(self.planner, self.task, dispatch.task_id, provisional)
        return _Result(dispatch, output=output, masked=masked, verdict=verdict)

    def apply(self, result: _Result) -> None:
        """Fold one finished subtask into the state, or log it as stale."""
        d = result.dispatch
        if self.inflight.get(d.task_id) != d.token:
            self.emit("stale_result", d.task_id, d.instance.label, "subtask was changed or removed while running")
            return
        del self.inflight[d.task_id]
        self.busy.pop(d.task_id, None)

        if result.error is not None or result.output is None:
            self.fail(d, result.error or "no output")
            return
        if result.masked:
            self.emit("masked", d.task_id, d.instance.label, f"output replaced with {result.output!r}")
        if result.verdict is not None:
            if not result.verdict.passed:
                self.emit("verify_failed", d.task_id, d.instance.label, result.verdict.rationale)
                self.fail(d, f"verification failed: {result.verdict.rationale}")
                return
            self.emit("verified", d.task_id, d.instance.label, result.verdict.rationale)
        self.state.mark_completed(d.task_id, result.output)
        self.emit("completed", d.task_id, d.instance.label, f"{len(result.output)} characters")

    def fail(self, d: _Dispatch, reason: str) -> None:
        self.state.mark_failed(d.task_id, reason)
        self.state.drain_notes()
        self.emit("failed", d.task_id, d.instance.label, reason)
        logger.warning("subtask failed", subtask=d.task_id, agent=d.instance.label, reason=reason)

    # -- refinement --

    def refinement_due(self, progressed: bool) -> bool:
        """Failures always call for a round; completions only under ``on_completion``."""
        if self.state.ids_with_status(SubtaskStatus.FAILED):
            return True
        return self.config.update_trigger == "on_completion" and progressed

    def budget_left(self) -> bool:
        """True while rounds remain. Logs exhaustion once."""
        if self.rounds < self.config.max_refinement_rounds:
            return True
        if not self.exhausted:
            self.exhausted = True
            detail = (
                "refinement disabled"
                if self.config.max_refinement_rounds == 0
                else f"{self.rounds} of {self.config.max_refinement_rounds} rounds used"
            )
            self.emit("budget_exhausted", detail=detail)
            logger.warning("refinement budget exhausted", rounds=self.rounds)
        return False

    def merge(self, response: PlannerResponse) -> None:
        """Apply one refinement response and log what the merge retired or reset."""
        self.rounds += 1
        round_label = f"round {self.rounds}"
        if response.kind != "update" or response.update is None or response.update.is_empty:
            self.emit("no_change", detail=round_label)
            return

        self.emit("update_proposed", detail=f"{round_label}: {len(response.update.tasks)} subtasks")
        merged = self.state.merge_update(response.update)
        if merged is self.state:
            self.emit("no_change", detail=f"{round_label}: update rejected at merge")
            return

        self.state = merged
        drained = self.state.drain_notes()
        notes = [f"{n.kind} {n.subtask}" for n in drained]
        for task_id in list(self.inflight):
            rec = self.state.records.get(task_id)
            if rec is None or rec.status is not SubtaskStatus.IN_PROGRESS:
                del self.inflight[task_id]
                self.busy.pop(task_id, None)
        self.emit("update_merged", detail="; ".join([round_label, *notes]))
        for note in drained:
            if note.kind != "failed":
                self.emit(note.kind, note.subtask, detail=note.detail)
        logger.info("workflow updated", revision=self.state.revision, round=self.rounds)

    async def refine(self) -> None:
        response = await propose_update(self.planner, self.task, self.state.snapshot(), self.planner_config)
        self.merge(response)

    # -- strategies --

    async def run_batch(self) -> None:
        """Dispatch a wave, wait for it to drain, apply results in id order, then refine."""
        while not self.state.is_complete:
            wave = self.dispatch_ready()
            if wave:
                results = await asyncio.gather(*wave)
                self.workers.clear()
                for result in sorted(results, key=lambda r: r.dispatch.task_id):
                    self.apply(result)
            if self.state.is_complete:
                break
            if self.refinement_due(bool(wave)) and self.budget_left():
                await self.refine()
                continue
            if not wave and not self.state.ready_set():
                break

    async def run_concurrent(self) -> None:
        """Refine as soon as a result arrives, overlapping planner calls with running subtasks."""
        refining: asyncio.Task[PlannerResponse] | None = None
        progressed = False
        self.dispatch_ready()
        try:
            while not self.state.is_complete:
                waiting: set[asyncio.Task[Any]] = set(self.workers)
                if refining is not None:
                    waiting.add(refining)
                if not waiting:
                    if self.refinement_due(progressed) and self.budget_left():
                        progressed = False
                        await self.refine()
                        self.dispatch_ready()
                        continue
                    break

                done, _pending = await asyncio.wait(waiting, return_when=asyncio.FIRST_COMPLETED)
                finished = sorted(
                    (t for t in done if t is not refining), key=lambda t: self.workers[t].task_id
                )
                for worker in finished:
                    self.workers.pop(worker)
                    self.apply(worker.result())
                    progressed = True
                if refining is not None and refining in done:
                    self.merge(refining.result())
                    refining = None

                if self.state.is_complete:
                    break
                if refining is None and self.refinement_due(progressed) and self.budget_left():
                    progressed = False
                    refining = asyncio.create_task(
                        propose_update(self.planner, self.task, self.state.snapshot(), self.planner_config),
                        name="refinement",
                    )
                self.dispatch_ready()
        finally:
            if refining is not None and not refining.done():
                refining.cancel()
            for worker in self.workers:
                worker.cancel()

    def outcome(self) -> Outcome:
        """Classify the finished run."""
        if self.state.is_complete:
            return "success"
        if self.config.max_refinement_rounds > 0 and self.rounds >= self.config.max_refinement_rounds:
            return "budget_exhausted"
        return "failure"


def _usage_of(*sources: object) -> dict[str, int]:
    """Token usage summed over the distinct ``usage`` counters of ``sources``."""
    total = Usage()
    seen: set[int] = set()
    for source in sources:
        usage = getattr(source, "usage", None)
        if isinstance(usage, Usage) and id(usage) not in seen:
            seen.add(id(usage))
            total.add(usage)
    return total.as_dict()


async def run_workflow(
    task: TaskSpec,
    planner: Planner,
    backend: AgentBackend,
    config: ExecutorConfig | None = None,
    injector: FaultInjector | None = None,
    planner_config: PlannerConfig | None = None,
    run_log: RunLog | None = None,
    plan: InitialPlan | None = None,
    config_echo: Mapping[str, Any] | None = None,
    on_planned: Callable[[InitialPlan], None] | None = None,
) -> RunReport:
    """Plan (unless ``plan`` is given), then execute until completion or until refinement runs out."""
    config = config or ExecutorConfig()
    planner_config = planner_config or PlannerConfig()
    log = run_log if run_log is not None else RunLog()
    echo = dict(config_echo) if config_echo is not None else {
        "strategy": config.strategy,
        "max_concurrent": config.max_concurrent,
        "max_refinement_rounds": config.max_refinement_rounds,
        "verify": config.verify_completions,
        "update_trigger": config.update_trigger,
        "k": planner_config.k,
    }
    started = time.perf_counter()

    if plan is None:
        try:
            plan = await plan_initial(planner, task, planner_config)
        except PlanningError as exc:
            logger.error("planning failed", error=str(exc))
            log.append("planned", 0, detail=json.dumps({"config": echo, "error": str(exc)}, sort_keys=True))
            log.append("done", 0, detail="failure")
            return RunReport(
                None, "failure", log.events, 0, time.perf_counter() - started, _usage_of(planner, backend), str(exc)
            )
        if on_planned is not None:
            on_planned(plan)

    state = WorkflowState.from_graph(plan.graph, goal=task.requirement)
    valid = sum(1 for m in plan.selection.metrics if m is not None)
    header = {"config": echo, "candidates": len(plan.candidates), "valid": valid}
    log.append("planned", 0, detail=json.dumps(header, sort_keys=True))
    winner_metrics = plan.selection.metrics[plan.selection.index]
    log.append(
        "selected",
        0,
        detail=json.dumps(
            {"index": plan.selection.index, "metrics": winner_metrics.as_dict() if winner_metrics else None},
            sort_keys=True,
        ),
    )

    coordinator = _Coordinator(task, planner, backend, config, planner_config, injector, log, state)
    logger.info("run started", subtasks=len(state.records), strategy=config.strategy)
    if config.strategy == "batch_update":
        await coordinator.run_batch()
    else:
        await coordinator.run_concurrent()

    outcome = coordinator.outcome()
    coordinator.emit("done", detail=outcome)
    wall_time = time.perf_counter() - started
    logger.info("run finished", outcome=outcome, rounds=coordinator.rounds, wall_time=round(wall_time, 3))
    return RunReport(
        coordinator.state,
        outcome,
        log.events,
        coordinator.rounds,
        wall_time,
        _usage_of(planner, backend),
    )
