"""Command-line entry point: ``flow plan|run|metrics|simulate|serve|fixtures``."""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import structlog

from .config import Config
from .errors import FlowError, GraphValidationError, SimulationError, SnapshotParseError
from .executor import FaultInjector
from .graph import GraphMetrics, graph_metrics, topological_levels
from .logs import configure_logging
from .session import FlowSession, default_out_dir, load_task, task_fixtures, workflow_fixtures
from .simulate import DEFAULT_TRIALS, DagSpec, FailureModel, edge_addition_experiment, run_ablation
from .state import WorkflowState

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FAILED = 3


def _version() -> str:
    try:
        return version("aov-flow")
    except PackageNotFoundError:
        return "0.0.0"


def _error(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _metrics_line(metrics: GraphMetrics) -> str:
    return (
        f"P_avg={metrics.parallelism_avg:.4f} C_dependency={metrics.dependency_complexity:.4f} T={metrics.level_count}"
    )


def _add_planner_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--planner", choices=["mock", "llm"], help="Planner backend (default: mock)")
    parser.add_argument("--k", type=int, help="Number of candidate workflows per planning step (default: 3)")
    parser.add_argument("--temperature", type=float, help="Sampling temperature for generation (default: 0.7)")
    parser.add_argument("--out", type=Path, help="Output directory (default: ./runs/<timestamp>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flow", description="Plan and run modular multi-agent workflows")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    parser.add_argument("--config", type=Path, help="Config file (default: ./flow.toml if present)")
    parser.add_argument("--log-level", help="Diagnostic log level (default: info or FLOW_LOG_LEVEL)")
    parser.add_argument("--json-logs", action="store_true", help="Write diagnostic logs as JSON lines")
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("plan", help="Generate candidate workflows and keep the most modular one")
    plan.add_argument("task_file", type=Path, help="Plain-text task requirement")
    _add_planner_flags(plan)

    run = sub.add_parser("run", help="Plan and execute a task end to end")
    run.add_argument("task_file", type=Path, help="Plain-text task requirement")
    _add_planner_flags(run)
    run.add_argument("--agents", choices=["stub", "llm"], help="Agent backend (default: stub)")
    run.add_argument("--strategy", choices=["batch_update", "concurrent_update"], help="Refinement strategy")
    run.add_argument("--update-trigger", choices=["on_completion", "on_failure"], help="When to ask for refinement")
    run.add_argument("--max-concurrent", type=int, help="Maximum subtasks running at once (default: 8)")
    run.add_argument("--max-rounds", type=int, help="Refinement round budget (default: 10)")
    run.add_argument("--no-update", action="store_true", help="Disable refinement entirely")
    run.add_argument("--no-verify", action="store_true", help="Skip completion verification")
    run.add_argument("--mask", action="append", default=[], metavar="ID", help="Mask this subtask's first output")
    run.add_argument("--mask-p", type=float, default=0.0, help="Probability of masking any subtask's first output")
    run.add_argument("--seed", type=int, help="Seed for fault injection (default: 0)")
    run.add_argument("--stub-latency", type=float, help="Stub agent latency in seconds (default: 0)")

    metrics = sub.add_parser("metrics", help="Print modularity metrics of a workflow snapshot")
    metrics.add_argument("workflow_file", type=Path, help="Workflow snapshot (JSON)")
    metrics.add_argument("--json", action="store_true", help="Machine-readable output")

    simulate = sub.add_parser("simulate", help="Reliability experiments")
    sim_sub = simulate.add_subparsers(dest="experiment", required=True)
    edge = sim_sub.add_parser(
        "edge-addition", aliases=["theorem1"], help="Add one dependency to random DAGs and compare expected completions"
    )
    edge.add_argument("--n", type=int, default=10, help="Subtasks per DAG (default: 10)")
    edge.add_argument("--p-f", type=float, default=0.3, help="Per-subtask failure probability (default: 0.3)")
    edge.add_argument("--edge-p", type=float, default=0.3, help="Forward edge probability (default: 0.3)")
    edge.add_argument("--pairs", type=int, default=200, help="Number of DAG pairs (default: 200)")
    edge.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="Monte Carlo trials, 0 to skip")
    edge.add_argument("--seed", type=int, default=0, help="Experiment seed (default: 0)")
    edge.add_argument("--out", type=Path, help="Output directory (default: ./runs/<timestamp>)")
    ablation = sim_sub.add_parser("ablation", help="Masked-output runs with and without refinement")
    ablation.add_argument("--seeds", type=int, default=5, help="Number of seeds (default: 5)")
    ablation.add_argument("--graph", choices=["fixture", "random"], default="fixture", help="Workflow family")
    ablation.add_argument("--n", type=int, default=8, help="Subtasks per random DAG (default: 8)")
    ablation.add_argument("--seed", type=int, default=0, help="First seed; seeds run from here upward (default: 0)")
    ablation.add_argument("--out", type=Path, help="Output directory (default: ./runs/<timestamp>)")

    sub.add_parser("serve", help="Run the MCP server on stdio")
    sub.add_parser("fixtures", help="List the shipped task prompts and workflow fixtures")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Config keys set explicitly on the command line."""
    mapping = {
        "planner": "planner",
        "agents": "agents",
        "k": "k",
        "temperature": "temperature",
        "strategy": "strategy",
        "update_trigger": "update_trigger",
        "max_concurrent": "max_concurrent",
        "max_rounds": "max_refinement_rounds",
        "seed": "seed",
        "stub_latency": "stub_latency",
        "out": "out_dir",
        "log_level": "log_level",
    }
    overrides = {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}
    if getattr(args, "no_update", False):
        overrides["max_refinement_rounds"] = 0
    if getattr(args, "no_verify", False):
        overrides["verify"] = False
    return overrides


def _load_config(args: argparse.Namespace) -> Config | None:
    """Merged config, or None after printing every validation error."""
    try:
        config = Config(config_file=args.config, **_overrides(args))
    except TypeError as exc:
        _error(str(exc))
        return None
    errors = config.validate()
    if errors:
        for error in errors:
            _error(error)
        return None
    configure_logging(config.log_level, json_output=args.json_logs)
    return config


# ── commands ──


def cmd_plan(args: argparse.Namespace, config: Config) -> int:
    """Plan a task and write the selected workflow."""
    try:
        task = load_task(args.task_file)
    except (OSError, ValueError) as exc:
        _error(f"cannot read task file {args.task_file}: {exc}")
        return EXIT_INPUT

    session = FlowSession(config)
    try:
        plan = asyncio.run(session.plan(task))
    except FlowError as exc:
        _error(f"planning failed: {exc}")
        return EXIT_INPUT

    winner = plan.selection.metrics[plan.selection.index]
    print(f"selected candidate {plan.selection.index} of {len(plan.candidates)}")
    if winner is not None:
        print(_metrics_line(winner))
    print(f"wrote {session.workflow_path} and {session.selection_path}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace, config: Config) -> int:
    """Plan and execute a task."""
    try:
        task = load_task(args.task_file)
    except (OSError, ValueError) as exc:
        _error(f"cannot read task file {args.task_file}: {exc}")
        return EXIT_INPUT
    try:
        injector = FaultInjector(args.mask, args.mask_p, seed=config.seed)
    except ValueError as exc:
        _error(str(exc))
        return EXIT_INPUT

    session = FlowSession(config)
    report = asyncio.run(session.run(task, injector))
    print(f"outcome: {report.outcome}")
    print(f"refinement rounds used: {report.refinement_rounds_used}")
    print(f"artifacts: {session.out_dir}")
    if report.error is not None:
        _error(f"planning failed: {report.error}")
        return EXIT_INPUT
    return EXIT_OK if report.outcome == "success" else EXIT_FAILED


def cmd_metrics(args: argparse.Namespace) -> int:
    """Print modularity metrics and execution levels of a snapshot."""
    try:
        state = WorkflowState.from_json(args.workflow_file.read_text(encoding="utf-8"))
        graph = state.to_graph()
        plan = topological_levels(graph)
        metrics = graph_metrics(graph)
    except OSError as exc:
        _error(f"cannot read workflow file {args.workflow_file}: {exc}")
        return EXIT_INPUT
    except (SnapshotParseError, GraphValidationError) as exc:
        _error(f"invalid workflow {args.workflow_file}: {exc}")
        return EXIT_INPUT

    levels = [sorted(level) for level in plan.levels]
    if args.json:
        print(json.dumps({**metrics.as_dict(), "levels": levels}, indent=2))
        return EXIT_OK
    print(f"{'P_avg':<14}{metrics.parallelism_avg:.4f}")
    print(f"{'C_dependency':<14}{metrics.dependency_complexity:.4f}")
    print(f"{'T':<14}{metrics.level_count}")
    print("levels:")
    for index, level in enumerate(levels, start=1):
        print(f"  {index}: {', '.join(level)}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: Config) -> int:
    """Run a reliability experiment and write its results."""
    out_dir: Path = args.out or config.out_dir or default_out_dir()
    try:
        if args.experiment != "ablation":
            report = edge_addition_experiment(
                DagSpec(args.n, args.edge_p, args.seed), FailureModel(args.p_f), args.pairs, args.trials
            )
            csv_path = out_dir / "edge_addition.csv"
            report.write_csv(csv_path)
            print(report.summary(), end="")
            print(f"wrote {csv_path}")
            return EXIT_OK

        ablation = asyncio.run(
            run_ablation(args.seeds, args.graph, args.n, config.executor_config(), first_seed=args.seed)
        )
    except SimulationError as exc:
        _error(str(exc))
        return EXIT_INPUT

    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "ablation.json"
    summary_path.write_text(
        json.dumps(
            {
                "graph": ablation.graph,
                "with_update": ablation.success_rate("with_update"),
                "without_update": ablation.success_rate("without_update"),
                "rows": [asdict(row) for row in ablation.rows],
                "skipped": ablation.skipped,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    print(ablation.summary(), end="")
    print(f"wrote {summary_path}")
    return EXIT_OK


def cmd_fixtures() -> int:
    """List shipped task prompts and workflow fixtures."""
    print("task prompts:")
    for name, path in task_fixtures().items():
        first = path.read_text(encoding="utf-8").strip().splitlines()[0]
        print(f"  {name:<10}{first[:70]}")
    print("workflow fixtures:")
    for name, path in workflow_fixtures().items():
        state = WorkflowState.from_json(path.read_text(encoding="utf-8"))
        metrics = graph_metrics(state.to_graph())
        print(f"  {name:<10}{len(state.records)} subtasks, {_metrics_line(metrics)}")
    return EXIT_OK


def run_cli(argv: list[str] | None = None) -> int:
    """Parse ``argv``, dispatch to a command and return its exit code."""
    args = build_parser().parse_args(argv)
    if args.command == "metrics":
        configure_logging(args.log_level or "warning", json_output=args.json_logs)
        return cmd_metrics(args)
    if args.command == "fixtures":
        return cmd_fixtures()

    config = _load_config(args)
    if config is None:
        return EXIT_INPUT
    if args.command == "plan":
        return cmd_plan(args, config)
    if args.command == "run":
        return cmd_run(args, config)
    if args.command == "simulate":
        return cmd_simulate(args, config)

    from .server import serve

    serve(config)
    return EXIT_OK


def main() -> None:
    """Main entry point for the ``flow`` command."""
    sys.exit(run_cli())
