"""Tests for aov_flow.server."""

from __future__ import annotations

import json
from pathlib import Path
from unittest.mock import patch

import pytest

from aov_flow.config import Config
from aov_flow.runlog import RunLog
from aov_flow.server import _format_event, plan_workflow, read_run_log, run_workflow, workflow_metrics

from .conftest import fixture_text

TASK = "Build a small static website with a stylesheet"

# ── Helpers ──


def _patch_config(config: Config | None = None):
    return patch("aov_flow.server.get_config", return_value=config or Config())


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.chdir(tmp_path)


# ── plan_workflow ──


class TestPlanWorkflow:
    @pytest.mark.asyncio
    async def test_empty_task(self) -> None:
        with _patch_config():
            assert await plan_workflow("   ") == "Error: task requirement required"

    @pytest.mark.asyncio
    async def test_plans(self, tmp_path: Path) -> None:
        with _patch_config():
            result = await plan_workflow(TASK, out_dir=str(tmp_path / "plan"))

        assert result.startswith("Selected candidate 0 of 3.")
        assert "candidate 2:" in result
        assert (tmp_path / "plan" / "workflow.json").exists()
        assert '"tasks"' in result

    @pytest.mark.asyncio
    async def test_default_out_dir_under_config(self, tmp_path: Path) -> None:
        with _patch_config(Config(out_dir=str(tmp_path / "base"))):
            await plan_workflow(TASK)
        assert len(list((tmp_path / "base").glob("*/workflow.json"))) == 1


# ── workflow_metrics ──


class TestWorkflowMetrics:
    @pytest.mark.asyncio
    async def test_empty(self) -> None:
        assert await workflow_metrics("") == "Error: workflow snapshot required"

    @pytest.mark.asyncio
    async def test_fixture(self) -> None:
        doc = json.loads(await workflow_metrics(fixture_text("w3")))
        assert doc["T"] == 4
        assert doc["C_dependency"] == pytest.approx(0.5)

    @pytest.mark.asyncio
    async def test_invalid(self) -> None:
        assert (await workflow_metrics("{broken")).startswith("Error:")


# ── run_workflow ──


class TestRunWorkflow:
    @pytest.mark.asyncio
    async def test_empty_task(self) -> None:
        with _patch_config():
            assert await run_workflow("") == "Error: task requirement required"

    @pytest.mark.asyncio
    async def test_masked_run_recovers(self, tmp_path: Path) -> None:
        out = tmp_path / "run"
        with _patch_config():
            result = await run_workflow(TASK, mask="C, ", out_dir=str(out))

        assert "Outcome: success" in result
        assert f"Artifacts: {out}" in result
        assert (out / "report.json").exists()

    @pytest.mark.asyncio
    async def test_masked_run_without_refinement(self, tmp_path: Path) -> None:
        with _patch_config(Config(max_refinement_rounds=0)):
            result = await run_workflow(TASK, mask="C", out_dir=str(tmp_path / "run"))
        assert "Outcome: failure" in result


# ── read_run_log ──


class TestReadRunLog:
    @pytest.mark.asyncio
    async def test_empty_dir(self) -> None:
        assert await read_run_log(" ") == "Error: run directory required"

    @pytest.mark.asyncio
    async def test_no_log(self, tmp_path: Path) -> None:
        assert await read_run_log(str(tmp_path)) == f"No run log in '{tmp_path}'."

    @pytest.mark.asyncio
    async def test_recent(self, tmp_path: Path) -> None:
        log = RunLog(tmp_path / "run.jsonl")
        log.append("planned", 0, detail="4 subtasks")
        log.append("dispatched", 0, "A", "writer#0")
        log.append("done", 0, detail="success")

        result = await read_run_log(str(tmp_path), recent=2)
        assert result.startswith("# Run log (2 events)")
        assert "planned" not in result
        assert "dispatched" in result
        assert "done" in result

    def test_format_event(self) -> None:
        entry = RunLog().append("completed", 2, "B", "designer#1", "12 characters")
        line = _format_event(entry)
        assert " r2 completed" in line
        assert line.endswith("B [designer#1]: 12 characters")
