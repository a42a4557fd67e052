"""Flow sessions: one output directory holding the artifacts of a plan or a run."""

from __future__ import annotations

import json
from contextlib import AsyncExitStack
from datetime import datetime
from pathlib import Path
from typing import Any

import httpx
import structlog

from .config import Config
from .executor import AgentBackend, FaultInjector, LlmBackend, RunReport, StubBackend, run_workflow
from .llm import LlmClient
from .planner import FIXTURES_DIR, InitialPlan, LlmPlanner, MockPlanner, Planner, TaskSpec, plan_initial
from .runlog import RunLog
from .state import WorkflowState

logger = structlog.get_logger(__name__)

WORKFLOW_FILE = "workflow.json"
SELECTION_FILE = "selection.json"
RUN_LOG_FILE = "run.jsonl"
FINAL_FILE = "final.json"
REPORT_FILE = "report.json"


def default_out_dir() -> Path:
    return Path("runs") / datetime.now().strftime("%Y%m%dT%H%M%S")


def load_task(path: Path) -> TaskSpec:
    """Read a plain-text task requirement."""
    return TaskSpec(path.read_text(encoding="utf-8").strip())


def task_fixtures() -> dict[str, Path]:
    return {p.stem: p for p in sorted((FIXTURES_DIR / "tasks").glob("*.txt"))}


def workflow_fixtures() -> dict[str, Path]:
    return {p.stem: p for p in sorted((FIXTURES_DIR / "workflows").glob("*.json"))}


def _write_json(path: Path, document: Any) -> None:
    path.write_text(json.dumps(document, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


class FlowSession:
    """Builds the planner and agents from a ``Config`` and writes artifacts under ``out_dir``."""

    def __init__(self, config: Config, out_dir: Path | None = None, transport: httpx.AsyncBaseTransport | None = None):
        self.config = config
        self.out_dir = out_dir or config.out_dir or default_out_dir()
        self._transport = transport

    @property
    def workflow_path(self) -> Path:
        return self.out_dir / WORKFLOW_FILE

    @property
    def selection_path(self) -> Path:
        return self.out_dir / SELECTION_FILE

    @property
    def run_log_path(self) -> Path:
        return self.out_dir / RUN_LOG_FILE

    @property
    def final_path(self) -> Path:
        return self.out_dir / FINAL_FILE

    @property
    def report_path(self) -> Path:
        return self.out_dir / REPORT_FILE

    def ensure_out_dir(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _make_planner(self, client: LlmClient | None) -> Planner:
        if self.config.planner == "llm" and client is not None:
            return LlmPlanner(client)
        return MockPlanner()

    def _make_backend(self, client: LlmClient | None) -> AgentBackend:
        if self.config.agents == "llm" and client is not None:
            return LlmBackend(client, temperature=self.config.temperature)
        return StubBackend(latency=self.config.stub_latency)

    async def _open_client(self, stack: AsyncExitStack) -> LlmClient | None:
        if not self.config.needs_provider:
            return None
        return await stack.enter_async_context(LlmClient.from_config(self.config, transport=self._transport))

    def _save_plan(self, task: TaskSpec, plan: InitialPlan) -> None:
        self.ensure_out_dir()
        state = WorkflowState.from_graph(plan.graph, goal=task.requirement)
        self.workflow_path.write_text(state.to_json(), encoding="utf-8")
        _write_json(self.selection_path, plan.to_document())

    async def plan(self, task: TaskSpec) -> InitialPlan:
        """Select an initial workflow and write ``workflow.json`` and ``selection.json``."""
        async with AsyncExitStack() as stack:
            client = await self._open_client(stack)
            plan = await plan_initial(self._make_planner(client), task, self.config.planner_config())
        self._save_plan(task, plan)
        logger.info("plan written", out_dir=str(self.out_dir), winner=plan.selection.index)
        return plan

    async def run(self, task: TaskSpec, injector: FaultInjector | None = None) -> RunReport:
        """Plan and execute, writing every artifact; planning failures end up in the report."""
        self.ensure_out_dir()
        async with AsyncExitStack() as stack:
            client = await self._open_client(stack)
            report = await run_workflow(
                task,
                self._make_planner(client),
                self._make_backend(client),
                self.config.executor_config(),
                injector,
                self.config.planner_config(),
                RunLog(self.run_log_path),
                config_echo=self.config.as_dict(),
                on_planned=lambda plan: self._save_plan(task, plan),
            )

        if report.final_state is not None:
            self.final_path.write_text(report.final_state.to_json(), encoding="utf-8")
        _write_json(self.report_path, report.to_document())
        logger.info("run written", out_dir=str(self.out_dir), outcome=report.outcome)
        return report
