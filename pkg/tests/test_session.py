"""Tests for aov_flow.session."""

from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from aov_flow.config import Config
from aov_flow.executor import FaultInjector
from aov_flow.planner import TaskSpec
from aov_flow.session import FlowSession, default_out_dir, load_task, task_fixtures, workflow_fixtures
from aov_flow.state import SubtaskStatus, WorkflowState

from .conftest import fixture_text

TASK = TaskSpec("Build a small static website with a stylesheet")

# ── Helpers ──


def _llm_transport(content: str, seen: list[httpx.Request]) -> httpx.MockTransport:
    async def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(
            200,
            json={
                "choices": [{"message": {"role": "assistant", "content": content}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 4},
            },
        )

    return httpx.MockTransport(handler)


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.chdir(tmp_path)


# ── Helpers in session ──


class TestSessionHelpers:
    def test_load_task_strips(self, task_file: Path) -> None:
        assert load_task(task_file).requirement == "Build a small static website with a stylesheet."

    def test_default_out_dir(self) -> None:
        out = default_out_dir()
        assert out.parent == Path("runs")
        assert len(out.name) == len("20250101T000000")

    def test_fixture_listings(self) -> None:
        assert list(task_fixtures()) == ["beamer", "gobang", "website"]
        assert list(workflow_fixtures()) == ["w1", "w2", "w3"]


# ── FlowSession ──


class TestFlowSession:
    def test_out_dir_precedence(self, tmp_path: Path) -> None:
        config = Config(out_dir=str(tmp_path / "configured"))
        assert FlowSession(config).out_dir == tmp_path / "configured"
        assert FlowSession(config, tmp_path / "explicit").out_dir == tmp_path / "explicit"
        assert FlowSession(Config()).out_dir.parent == Path("runs")

    @pytest.mark.asyncio
    async def test_plan_writes_workflow_and_selection(self, tmp_path: Path) -> None:
        session = FlowSession(Config(), tmp_path / "plan")
        plan = await session.plan(TASK)

        state = WorkflowState.from_json(session.workflow_path.read_text(encoding="utf-8"))
        assert state.goal == TASK.requirement
        assert state.to_graph().edges == plan.graph.edges
        selection = json.loads(session.selection_path.read_text(encoding="utf-8"))
        assert [c["valid"] for c in selection["candidates"]] == [True, True, True]

    @pytest.mark.asyncio
    async def test_run_writes_every_artifact(self, tmp_path: Path) -> None:
        session = FlowSession(Config(), tmp_path / "run")
        report = await session.run(TASK, FaultInjector({"C"}))

        assert report.outcome == "success"
        final = WorkflowState.from_json(session.final_path.read_text(encoding="utf-8"))
        assert all(rec.status is SubtaskStatus.COMPLETED for rec in final.records.values())
        assert session.run_log_path.read_text(encoding="utf-8").count("\n") == len(report.events)
        doc = json.loads(session.report_path.read_text(encoding="utf-8"))
        assert doc["outcome"] == "success"
        assert doc["revision"] == 1

    @pytest.mark.asyncio
    async def test_llm_planner(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        monkeypatch.setenv("FLOW_API_KEY", "sk-test")
        seen: list[httpx.Request] = []
        session = FlowSession(
            Config(planner="llm"), tmp_path / "plan", transport=_llm_transport(fixture_text("w2"), seen)
        )
        plan = await session.plan(TASK)

        assert len(seen) == 3
        assert sorted(plan.graph.vertices) == sorted(WorkflowState.from_json(fixture_text("w2")).records)

    @pytest.mark.asyncio
    async def test_llm_agents(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
        monkeypatch.setenv("FLOW_API_KEY", "sk-test")
        seen: list[httpx.Request] = []
        session = FlowSession(Config(agents="llm"), tmp_path / "run", transport=_llm_transport("agent output", seen))
        report = await session.run(TASK)

        assert report.outcome == "success"
        assert len(seen) == 4
        assert report.token_usage["requests"] == 4
        assert report.token_usage["total_tokens"] == 56
        final = WorkflowState.from_json(session.final_path.read_text(encoding="utf-8"))
        assert {rec.data for rec in final.records.values()} == {"agent output"}
