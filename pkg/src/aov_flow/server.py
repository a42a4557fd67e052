"""MCP server exposing workflow planning, metrics and execution as tools."""

from __future__ import annotations

import json
from pathlib import Path

import structlog
from mcp.server.fastmcp import FastMCP

from .config import Config
from .errors import FlowError
from .executor import FaultInjector
from .graph import graph_metrics, topological_levels
from .planner import TaskSpec
from .runlog import RunEvent, load_run_log
from .session import RUN_LOG_FILE, FlowSession, default_out_dir
from .state import WorkflowState

logger = structlog.get_logger(__name__)

# Global config - set at startup
_config: Config | None = None


def get_config() -> Config:
    """Get the server configuration."""
    global _config
    if _config is None:
        _config = Config()
    return _config


# Initialize FastMCP server
mcp = FastMCP("aov-flow")


def _session(out_dir: str = "") -> FlowSession:
    config = get_config()
    base = config.out_dir or Path("runs")
    return FlowSession(config, Path(out_dir) if out_dir.strip() else base / default_out_dir().name)


def _format_event(event: RunEvent) -> str:
    timestamp = event["ts"][:19].replace("T", " ")
    subject = event["subtask"] or "-"
    agent = f" [{event['agent']}]" if event["agent"] else ""
    detail = f": {event['detail']}" if event["detail"] else ""
    return f"{timestamp} r{event['revision']} {event['event']:<16} {subject}{agent}{detail}"


@mcp.tool()
async def plan_workflow(task: str, out_dir: str = "") -> str:
    """Plan a workflow for a task and report the selected candidate.

    Args:
        task: The task requirement, verbatim
        out_dir: Directory for workflow.json and selection.json (default: a new directory under runs/)
    """
    task = task.strip()
    if not task:
        return "Error: task requirement required"

    session = _session(out_dir)
    try:
        plan = await session.plan(TaskSpec(task))
    except FlowError as e:
        return f"Error: planning failed: {e}"

    lines = [f"Selected candidate {plan.selection.index} of {len(plan.candidates)}."]
    for entry in plan.to_document()["candidates"]:
        status = json.dumps(entry["metrics"]) if entry["valid"] else f"dropped ({entry['reason']})"
        lines.append(f"  candidate {entry['index']}: {status}")
    lines.append("")
    lines.append(session.workflow_path.read_text(encoding="utf-8"))
    return "\n".join(lines)


@mcp.tool()
async def workflow_metrics(workflow: str) -> str:
    """Compute parallelism, dependency complexity and levels of a workflow snapshot.

    Args:
        workflow: Workflow snapshot as JSON text
    """
    if not workflow.strip():
        return "Error: workflow snapshot required"
    try:
        graph = WorkflowState.from_json(workflow).to_graph()
        plan = topological_levels(graph)
        metrics = graph_metrics(graph)
    except FlowError as e:
        return f"Error: {e}"
    return json.dumps({**metrics.as_dict(), "levels": [sorted(level) for level in plan.levels]}, indent=2)


@mcp.tool()
async def run_workflow(task: str, mask: str = "", out_dir: str = "") -> str:
    """Plan and execute a task, returning the outcome and where the artifacts were written.

    Args:
        task: The task requirement, verbatim
        mask: Comma-separated subtask ids whose first output is replaced with "none"
        out_dir: Directory for the run artifacts (default: a new directory under runs/)
    """
    task = task.strip()
    if not task:
        return "Error: task requirement required"

    session = _session(out_dir)
    mask_ids = [m.strip() for m in mask.split(",") if m.strip()]
    report = await session.run(TaskSpec(task), FaultInjector(mask_ids, seed=get_config().seed))
    if report.error is not None:
        return f"Error: planning failed: {report.error}"

    lines = [
        f"Outcome: {report.outcome}",
        f"Refinement rounds used: {report.refinement_rounds_used}",
        f"Subtasks run: {report.subtasks_run}",
        f"Artifacts: {session.out_dir}",
    ]
    return "\n".join(lines)


@mcp.tool()
async def read_run_log(run_dir: str, recent: int = 0) -> str:
    """Read the event log of a run.

    Args:
        run_dir: Directory of the run (as reported by run_workflow)
        recent: Only show last N events (0 = all)
    """
    run_dir = run_dir.strip()
    if not run_dir:
        return "Error: run directory required"

    events = load_run_log(Path(run_dir) / RUN_LOG_FILE)
    if not events:
        return f"No run log in '{run_dir}'."

    if recent > 0:
        events = events[-recent:]

    lines = [f"# Run log ({len(events)} events)", ""]
    lines.extend(_format_event(e) for e in events)
    return "\n".join(lines)


def serve(config: Config) -> None:
    """Run the MCP server on stdio with ``config``."""
    global _config
    _config = config
    logger.info("serving", planner=config.planner, agents=config.agents)
    mcp.run(transport="stdio")
