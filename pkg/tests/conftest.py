"""Shared test fixtures."""

from __future__ import annotations

from collections.abc import Iterable
from pathlib import Path
from typing import Any

import pytest
import structlog

from aov_flow.graph import AovGraph
from aov_flow.planner import FIXTURES_DIR
from aov_flow.state import WorkflowState

WORKFLOWS_DIR = FIXTURES_DIR / "workflows"


@pytest.fixture(autouse=True)
def _quiet_logs() -> None:
    """Keep structlog on its defaults so one test's configure_logging does not leak."""
    structlog.reset_defaults()


@pytest.fixture(autouse=True)
def _no_provider_env(monkeypatch: pytest.MonkeyPatch) -> None:
    for name in ("FLOW_API_KEY", "FLOW_API_BASE", "FLOW_MODEL", "FLOW_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def make_graph(edges: Iterable[tuple[str, str]], ids: Iterable[str] = (), role: str = "worker") -> AovGraph:
    """Graph over ``ids`` plus every edge endpoint, each subtask with a placeholder requirement."""
    edges = list(edges)
    vertices = list(dict.fromkeys([*ids, *(v for e in edges for v in e)]))
    return AovGraph.build({v: (f"do {v}", role) for v in vertices}, edges)


def fixture_text(name: str) -> str:
    return (WORKFLOWS_DIR / f"{name}.json").read_text(encoding="utf-8")


def fixture_state(name: str) -> WorkflowState:
    return WorkflowState.from_json(fixture_text(name))


def fixture_graph(name: str) -> AovGraph:
    return fixture_state(name).to_graph()


def make_snapshot(tasks: dict[str, dict[str, Any]], goal: str = "test goal", revision: int = 0) -> dict[str, Any]:
    """Snapshot document with defaults filled in for every task entry."""
    filled = {}
    for task_id, task in tasks.items():
        entry = {
            "requirement": f"do {task_id}",
            "status": "not_started",
            "data": None,
            "child": [],
            "agent": "worker",
        }
        entry.update(task)
        filled[task_id] = entry
    return {"goal": goal, "revision": revision, "tasks": filled}


@pytest.fixture
def w1_state() -> WorkflowState:
    return fixture_state("w1")


@pytest.fixture
def diamond() -> AovGraph:
    return make_graph([("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])


@pytest.fixture
def task_file(tmp_path: Path) -> Path:
    path = tmp_path / "task.txt"
    path.write_text("Build a small static website with a stylesheet.\n", encoding="utf-8")
    return path
