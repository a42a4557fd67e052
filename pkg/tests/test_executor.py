"""Tests for aov_flow.executor."""

from __future__ import annotations

import asyncio
import json
from datetime import datetime
from pathlib import Path

import pytest

from aov_flow.errors import LlmTransportError
from aov_flow.executor import (
    AgentInstance,
    ExecutorConfig,
    FaultInjector,
    RunReport,
    StubBackend,
    Upstream,
    _usage_of,
    allocate_agents,
    build_agent_prompt,
    run_workflow,
    upstream_digest,
)
from aov_flow.graph import AgentRole
from aov_flow.llm import Usage
from aov_flow.planner import MockPlanner, PlannerConfig, TaskSpec, plan_initial
from aov_flow.runlog import RunEvent, RunLog, audit_run_log, dispatch_counts, load_run_log
from aov_flow.simulate import DagSpec, random_dag, repair_round
from aov_flow.state import SubtaskRecord, SubtaskStatus, WorkflowState

from .conftest import fixture_text, make_snapshot

TASK = TaskSpec("Build a small static website with a stylesheet")

# ── Helpers ──


class LatencyBackend(StubBackend):
    """Stub agents with a per-subtask delay that record the peak number of concurrent calls."""

    def __init__(self, delays: dict[str, float] | None = None, default: float = 0.0):
        super().__init__()
        self.delays = delays or {}
        self.default = default
        self.active = 0
        self.peak = 0

    async def run(self, instance: AgentInstance, task_id: str, record: SubtaskRecord, upstream: Upstream) -> str:
        self.active += 1
        self.peak = max(self.peak, self.active)
        try:
            await asyncio.sleep(self.delays.get(task_id, self.default))
            return await super().run(instance, task_id, record, upstream)
        finally:
            self.active -= 1


class RevisingPlanner(MockPlanner):
    """Mock planner that answers the first refinement requests from a script."""

    def __init__(self, fixtures: list[str], revisions: list[str]):
        super().__init__(fixtures)
        self.revisions = list(revisions)

    async def revise(self, task: TaskSpec, state: WorkflowState, config: PlannerConfig, index: int) -> str:
        if self.revisions:
            return self.revisions.pop(0)
        return await super().revise(task, state, config, index)


def _snapshot_text(tasks: dict[str, dict]) -> str:
    return json.dumps(make_snapshot(tasks))


def _independent(n: int) -> str:
    return _snapshot_text({f"t{i}": {} for i in range(n)})


async def _run(
    snapshot: str,
    config: ExecutorConfig | None = None,
    injector: FaultInjector | None = None,
    backend: StubBackend | None = None,
    planner: MockPlanner | None = None,
) -> RunReport:
    return await run_workflow(
        TASK,
        planner or MockPlanner([snapshot]),
        backend or StubBackend(),
        config or ExecutorConfig(),
        injector,
        PlannerConfig(k=1),
    )


def _audit(report: RunReport) -> list[str]:
    assert report.final_state is not None
    return audit_run_log(report.events, report.final_state.parents_of())


def _of(report: RunReport, event: str) -> list[RunEvent]:
    return [e for e in report.events if e["event"] == event]


def _ts(event: RunEvent) -> float:
    return datetime.fromisoformat(event["ts"]).timestamp()


# ── Configuration ──


class TestExecutorConfig:
    def test_defaults(self) -> None:
        config = ExecutorConfig()
        assert config.strategy == "batch_update"
        assert config.max_concurrent == 8
        assert config.max_refinement_rounds == 10
        assert config.verify_completions
        assert config.update_trigger == "on_completion"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"strategy": "eager"},
            {"update_trigger": "sometimes"},
            {"max_concurrent": 0},
            {"max_refinement_rounds": -1},
        ],
    )
    def test_rejects(self, kwargs: dict) -> None:
        with pytest.raises(ValueError):
            ExecutorConfig(**kwargs)


# ── Agents ──


class TestAllocateAgents:
    def test_clones_shared_roles(self) -> None:
        state = WorkflowState.from_json(
            _snapshot_text({"a": {"agent": "writer"}, "b": {"agent": "writer"}, "c": {"agent": "designer"}})
        )
        agents = allocate_agents({"c", "b", "a"}, state)
        assert {k: v.label for k, v in agents.items()} == {"a": "writer#0", "b": "writer#1", "c": "designer#0"}

    def test_skips_busy_instances(self) -> None:
        state = WorkflowState.from_json(_snapshot_text({"a": {"agent": "writer"}, "b": {"agent": "writer"}}))
        agents = allocate_agents(["a", "b"], state, busy=[AgentInstance(AgentRole("writer"), 0)])
        assert [agents[k].clone_index for k in ("a", "b")] == [1, 2]

    def test_persona_carried(self) -> None:
        doc = make_snapshot({"a": {"agent": {"name": "critic", "persona": "Be strict."}}})
        state = WorkflowState.from_document(doc)
        assert allocate_agents(["a"], state)["a"].role == AgentRole("critic", "Be strict.")

    def test_missing_role_left_out(self) -> None:
        state = WorkflowState.from_json(_independent(2))
        state.records["t1"].agent = " "
        assert set(allocate_agents(["t0", "t1"], state)) == {"t0"}


class TestStubBackend:
    @pytest.mark.asyncio
    async def test_outputs(self) -> None:
        backend = StubBackend()
        instance = AgentInstance(AgentRole("w"))
        record = SubtaskRecord("do it", "w")
        assert await backend.run(instance, "A", record, {}) == "done(A)"
        with_upstream = await backend.run(instance, "C", record, {"A": "done(A)", "B": "done(B)"})
        assert with_upstream == f"done(C) upstream={upstream_digest({'B': 'done(B)', 'A': 'done(A)'})}"

    @pytest.mark.asyncio
    async def test_failing_ids(self) -> None:
        backend = StubBackend(fail_ids={"A"})
        with pytest.raises(LlmTransportError):
            await backend.run(AgentInstance(AgentRole("w")), "A", SubtaskRecord("do it", "w"), {})

    def test_digest_depends_on_payload(self) -> None:
        assert upstream_digest({"A": "x"}) != upstream_digest({"A": "y"})
        assert upstream_digest({"A": "xy"}) != upstream_digest({"Ax": "y"})
        assert len(upstream_digest({})) == 12

    def test_agent_prompt(self) -> None:
        prompt = build_agent_prompt("C", SubtaskRecord("combine pages", "developer"), {"B": "css", "A": "html"})
        assert "combine pages" in prompt
        assert prompt.index("[A]\nhtml") < prompt.index("[B]\ncss")
        assert "(none)" in build_agent_prompt("A", SubtaskRecord("write", "writer"), {})


class TestFaultInjector:
    def test_listed_ids_first_attempt_only(self) -> None:
        injector = FaultInjector({"C"})
        assert injector.inject("C", "real") == "none"
        assert injector.inject("C", "real", attempt=1) == "real"
        assert injector.inject("A", "real") == "real"

    def test_probability_is_deterministic(self) -> None:
        ids = [f"t{i}" for i in range(200)]
        first = [FaultInjector(mask_probability=0.3, seed=5).masks(t) for t in ids]
        second = [FaultInjector(mask_probability=0.3, seed=5).masks(t) for t in reversed(ids)]
        assert first == list(reversed(second))
        assert 30 < sum(first) < 90
        other = [FaultInjector(mask_probability=0.3, seed=6).masks(t) for t in ids]
        assert first != other

    def test_extremes(self) -> None:
        assert not FaultInjector(mask_probability=0.0).masks("x")
        assert FaultInjector(mask_probability=1.0).masks("x")

    @pytest.mark.parametrize("kwargs", [{"mask_probability": 1.5}, {"mask_probability": -0.1}, {"seed": -1}])
    def test_rejects(self, kwargs: dict) -> None:
        with pytest.raises(ValueError):
            FaultInjector(**kwargs)


# ── Batch runs ──


class TestBatchRun:
    @pytest.mark.asyncio
    async def test_clean_run(self) -> None:
        report = await _run(fixture_text("w1"))

        assert report.outcome == "success"
        assert report.error is None
        assert report.subtasks_run == 4
        assert _audit(report) == []
        tokens = [e["event"] for e in report.events]
        assert tokens[:2] == ["planned", "selected"]
        assert report.events[-1]["event"] == "done"
        assert report.events[-1]["detail"] == "success"
        assert report.final_state is not None
        assert report.final_state.is_complete
        assert report.final_state.completion_order == ["A", "B", "C", "D"]
        assert (report.final_state.records["D"].data or "").startswith("done(D) upstream=")

    @pytest.mark.asyncio
    async def test_header_events(self) -> None:
        report = await _run(fixture_text("w1"))
        planned = json.loads(_of(report, "planned")[0]["detail"])
        assert planned["candidates"] == 1
        assert planned["valid"] == 1
        assert planned["config"]["strategy"] == "batch_update"
        selected = json.loads(_of(report, "selected")[0]["detail"])
        assert selected["index"] == 0
        assert selected["metrics"]["T"] == 3

    @pytest.mark.asyncio
    async def test_shared_role_is_cloned(self) -> None:
        report = await _run(_independent(3))
        agents = sorted(e["agent"] for e in _of(report, "dispatched"))
        assert agents == ["worker#0", "worker#1", "worker#2"]

    @pytest.mark.asyncio
    async def test_wave_runs_in_parallel(self) -> None:
        backend = LatencyBackend(default=0.2)
        report = await _run(_independent(6), backend=backend)

        assert report.outcome == "success"
        assert backend.peak == 6
        start = min(_ts(e) for e in _of(report, "dispatched"))
        end = max(_ts(e) for e in _of(report, "completed"))
        assert end - start <= 0.3

    @pytest.mark.asyncio
    async def test_concurrency_cap(self) -> None:
        backend = LatencyBackend(default=0.01)
        report = await _run(_independent(6), ExecutorConfig(max_concurrent=2), backend=backend)
        assert report.outcome == "success"
        assert backend.peak == 2

    @pytest.mark.asyncio
    async def test_masked_subtask_repaired(self) -> None:
        report = await _run(fixture_text("w1"), injector=FaultInjector({"C"}))

        assert report.outcome == "success"
        assert repair_round(report.events) == 2
        assert dispatch_counts(report.events)["C"] == 2
        assert [e["subtask"] for e in _of(report, "masked")] == ["C"]
        assert [e["subtask"] for e in _of(report, "verify_failed")] == ["C"]
        assert _audit(report) == []
        assert report.final_state is not None
        assert report.final_state.records["C"].data != "none"
        assert "C_review" in report.final_state.records
        assert report.final_state.revision == 1

    @pytest.mark.asyncio
    async def test_repair_on_failure_trigger(self) -> None:
        config = ExecutorConfig(update_trigger="on_failure")
        report = await _run(fixture_text("w1"), config, FaultInjector({"C"}))
        assert report.outcome == "success"
        assert repair_round(report.events) == 1
        assert report.refinement_rounds_used == 1
        assert _of(report, "no_change") == []

    @pytest.mark.asyncio
    async def test_without_update_fails(self) -> None:
        config = ExecutorConfig(max_refinement_rounds=0)
        report = await _run(fixture_text("w1"), config, FaultInjector({"C"}))

        assert report.outcome == "failure"
        assert report.refinement_rounds_used == 0
        exhausted = _of(report, "budget_exhausted")
        assert [e["detail"] for e in exhausted] == ["refinement disabled"]
        assert "D" not in dispatch_counts(report.events)
        assert report.final_state is not None
        assert report.final_state.records["C"].status is SubtaskStatus.FAILED

    @pytest.mark.asyncio
    async def test_budget_exhausted(self) -> None:
        config = ExecutorConfig(max_refinement_rounds=1)
        report = await _run(fixture_text("w1"), config, FaultInjector({"C"}))
        assert report.outcome == "budget_exhausted"
        assert report.refinement_rounds_used == 1
        assert len(_of(report, "budget_exhausted")) == 1

    @pytest.mark.asyncio
    async def test_masked_output_accepted_without_verification(self) -> None:
        config = ExecutorConfig(verify_completions=False)
        report = await _run(fixture_text("w1"), config, FaultInjector({"C"}))
        assert report.outcome == "success"
        assert report.final_state is not None
        assert report.final_state.records["C"].data == "none"
        assert _of(report, "verified") == []
        assert _of(report, "update_merged") == []

    @pytest.mark.asyncio
    async def test_agent_errors_fail_the_subtask(self) -> None:
        config = ExecutorConfig(max_refinement_rounds=2)
        report = await _run(fixture_text("w1"), config, backend=StubBackend(fail_ids={"B"}))
        assert report.outcome == "budget_exhausted"
        assert dispatch_counts(report.events)["B"] == 3
        assert all("agent error" in e["detail"] for e in _of(report, "failed"))
        assert _audit(report) == []

    @pytest.mark.asyncio
    async def test_deterministic_given_seed(self) -> None:
        def trace(report: RunReport) -> list[tuple]:
            return [(e["revision"], e["event"], e["subtask"], e["agent"], e["detail"]) for e in report.events]

        runs = [
            await _run(fixture_text("w1"), injector=FaultInjector(mask_probability=0.5, seed=7)) for _ in range(2)
        ]
        assert trace(runs[0]) == trace(runs[1])

    @pytest.mark.asyncio
    async def test_retired_subtask_data_kept_in_run_log(self, tmp_path: Path) -> None:
        snapshot = _snapshot_text({"a": {"child": ["b"]}, "b": {}})
        update = make_snapshot({"b": {}, "c": {}, "d": {}})
        planner = RevisingPlanner([snapshot], [json.dumps(update["tasks"])])
        path = tmp_path / "run.jsonl"

        report = await run_workflow(
            TASK, planner, StubBackend(), planner_config=PlannerConfig(k=1), run_log=RunLog(path)
        )

        assert report.outcome == "success"
        assert report.final_state is not None
        assert "a" not in report.final_state.records
        retired = [e for e in load_run_log(path) if e["event"] == "retired"]
        assert [(e["subtask"], e["detail"]) for e in retired] == [("a", "done(a)")]
        assert retired[0]["revision"] == 1
        assert _audit(report) == []


# ── Concurrent runs ──


class TestConcurrentRun:
    @pytest.mark.asyncio
    async def test_masked_subtask_repaired(self) -> None:
        config = ExecutorConfig(strategy="concurrent_update")
        report = await _run(fixture_text("w1"), config, FaultInjector({"C"}))
        assert report.outcome == "success"
        assert _audit(report) == []
        assert report.final_state is not None
        assert report.final_state.check_consistency() == []

    @pytest.mark.asyncio
    async def test_result_of_reset_subtask_is_stale(self) -> None:
        snapshot = _snapshot_text({"fast": {}, "slow": {}})
        update = make_snapshot(
            {"fast": {"status": "completed"}, "slow": {"requirement": "do slow, more carefully"}, "extra": {}}
        )
        planner = RevisingPlanner([snapshot], [json.dumps(update["tasks"])])
        backend = LatencyBackend({"slow": 0.2})
        config = ExecutorConfig(strategy="concurrent_update")

        report = await _run(snapshot, config, backend=backend, planner=planner)

        assert report.outcome == "success"
        assert [e["subtask"] for e in _of(report, "stale_result")] == ["slow"]
        assert dispatch_counts(report.events)["slow"] == 2
        assert _audit(report) == []
        assert report.final_state is not None
        assert report.final_state.records["slow"].requirement == "do slow, more carefully"
        assert report.final_state.records["extra"].status is SubtaskStatus.COMPLETED


# ── run_workflow ──


class TestRunWorkflow:
    @pytest.mark.asyncio
    async def test_planning_failure(self) -> None:
        bad = _snapshot_text({"a": {"child": ["b"]}, "b": {"child": ["a"]}})
        report = await _run(bad)
        assert report.outcome == "failure"
        assert report.final_state is None
        assert report.error is not None
        assert [e["event"] for e in report.events] == ["planned", "done"]
        assert "error" in json.loads(report.events[0]["detail"])

    @pytest.mark.asyncio
    async def test_given_plan_skips_planning(self) -> None:
        planner = MockPlanner([fixture_text("w3")])
        plan = await plan_initial(planner, TASK, PlannerConfig(k=1))
        seen = []
        report = await run_workflow(TASK, planner, StubBackend(), plan=plan, on_planned=seen.append)
        assert report.outcome == "success"
        assert seen == []

    @pytest.mark.asyncio
    async def test_on_planned_called_once(self) -> None:
        seen = []
        await run_workflow(
            TASK, MockPlanner(), StubBackend(), planner_config=PlannerConfig(k=3), on_planned=seen.append
        )
        assert len(seen) == 1
        assert seen[0].selection.index == 0

    @pytest.mark.asyncio
    async def test_run_log_file(self, tmp_path: Path) -> None:
        path = tmp_path / "run.jsonl"
        report = await run_workflow(TASK, MockPlanner([fixture_text("w2")]), StubBackend(), run_log=RunLog(path))
        assert load_run_log(path) == report.events

    @pytest.mark.asyncio
    async def test_report_document(self) -> None:
        report = await _run(fixture_text("w1"), injector=FaultInjector({"C"}))
        doc = report.to_document()
        assert doc["outcome"] == "success"
        assert doc["statuses"] == {"completed": 5}
        assert doc["revision"] == 1
        assert doc["subtasks_run"] == 6
        assert doc["token_usage"]["total_tokens"] == 0

    def test_shared_usage_counted_once(self) -> None:
        class Source:
            def __init__(self, usage: Usage):
                self.usage = usage

        shared = Usage(10, 5, 2)
        total = _usage_of(Source(shared), Source(shared), Source(Usage(1, 1, 1)))
        assert total == {"prompt_tokens": 11, "completion_tokens": 6, "total_tokens": 17, "requests": 3}


@pytest.mark.slow
class TestRandomWorkflows:
    @pytest.mark.asyncio
    @pytest.mark.parametrize("strategy", ["batch_update", "concurrent_update"])
    async def test_dispatch_safety_under_masking(self, strategy: str) -> None:
        for seed in range(100):
            graph = random_dag(DagSpec(8, 0.4, seed))
            snapshot = WorkflowState.from_graph(graph, goal="random").to_json()
            config = ExecutorConfig(
                strategy=strategy,  # type: ignore[arg-type]
                update_trigger="on_failure",
                max_refinement_rounds=40,
            )
            report = await _run(snapshot, config, FaultInjector(mask_probability=0.3, seed=seed))

            assert report.outcome in ("success", "budget_exhausted")
            assert _audit(report) == [], f"seed {seed}"
            assert report.final_state is not None
            assert report.final_state.check_consistency() == [], f"seed {seed}"

    @pytest.mark.asyncio
    @pytest.mark.parametrize("strategy", ["batch_update", "concurrent_update"])
    async def test_clean_runs_dispatch_once(self, strategy: str) -> None:
        for seed in range(250):
            graph = random_dag(DagSpec(10, 0.3, seed))
            snapshot = WorkflowState.from_graph(graph, goal="random").to_json()
            report = await _run(snapshot, ExecutorConfig(strategy=strategy))  # type: ignore[arg-type]

            assert report.outcome == "success", f"seed {seed}"
            assert dispatch_counts(report.events) == dict.fromkeys(graph.vertices, 1), f"seed {seed}"
            assert _audit(report) == [], f"seed {seed}"
