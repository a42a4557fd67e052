"""Reliability of workflows under independent subtask failures.

Two models are computed side by side. The *recursion* model multiplies the
success probabilities of immediate predecessors as if they were independent.
*Trajectory* semantics is the exact model: a subtask completes iff its own
coin succeeds and every ancestor completed. They agree on forests and diverge
when predecessors share ancestors.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import networkx as nx
import numpy as np
import structlog

from .errors import SimulationError
from .executor import ExecutorConfig, FaultInjector, StubBackend, run_workflow
from .graph import AgentRole, AovGraph, validate
from .planner import FIXTURES_DIR, MockPlanner, PlannerConfig, TaskSpec
from .runlog import RunEvent
from .state import WorkflowState

logger = structlog.get_logger(__name__)

Method = Literal["recursion", "enumeration", "monte_carlo"]
METHODS: tuple[Method, ...] = ("recursion", "enumeration", "monte_carlo")

ENUMERATION_LIMIT = 20
DEFAULT_TRIALS = 100_000
CHUNK_SIZE = 1 << 16
REDRAW_LIMIT = 16
DEFAULT_ROLE = "worker"

CSV_COLUMNS = (
    "pair",
    "n",
    "p_f",
    "E_rec_A",
    "E_rec_B",
    "delta",
    "mc_A",
    "mc_B",
    "mc_se_A",
    "mc_se_B",
    "b_was_ancestor",
    "b",
    "v_star",
    "delta_vstar",
    "E_traj_A",
    "E_traj_B",
)


@dataclass(frozen=True)
class FailureModel:
    p_f: float

    def __post_init__(self) -> None:
        if not 0.0 < self.p_f < 1.0:
            raise SimulationError(f"p_f must be strictly between 0 and 1, got {self.p_f}")

    @property
    def q(self) -> float:
        return 1.0 - self.p_f


@dataclass(frozen=True)
class SimResult:
    expected_completed: float
    per_node: Mapping[str, float]
    method: Method
    trials: int | None = None
    std_error: float | None = None
    seed: int | None = None


@dataclass(frozen=True)
class DagSpec:
    n: int
    edge_probability: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise SimulationError("n must be at least 1")
        if not 0.0 <= self.edge_probability <= 1.0:
            raise SimulationError("edge_probability must be in [0, 1]")
        if self.seed < 0:
            raise SimulationError("seed must be nonnegative")


def _stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _checked(graph: AovGraph) -> nx.DiGraph:
    validate(graph).raise_for_violations()
    return graph.to_networkx()


# -- exact models --


def success_probabilities_recursion(graph: AovGraph, model: FailureModel) -> dict[str, float]:
    """P(v) = (1 - p_f) times the product of P over v's immediate predecessors."""
    g = _checked(graph)
    probabilities: dict[str, float] = {}
    for vertex in nx.topological_sort(g):
        p = model.q
        for parent in g.predecessors(vertex):
            p *= probabilities[parent]
        probabilities[vertex] = p
    return {v: probabilities[v] for v in graph.vertices}


def trajectory_probabilities(graph: AovGraph, model: FailureModel) -> dict[str, float]:
    """Exact completion probability: every ancestor and the vertex itself must succeed."""
    g = _checked(graph)
    return {v: model.q ** (len(nx.ancestors(g, v)) + 1) for v in graph.vertices}


def _completion_matrix(g: nx.DiGraph, order: list[str], success: np.ndarray) -> np.ndarray:
    """Propagate per-vertex coin outcomes (rows = outcomes, columns = ``order``) to completions."""
    column = {v: i for i, v in enumerate(order)}
    completed = success.copy()
    for vertex in order:
        i = column[vertex]
        for parent in g.predecessors(vertex):
            completed[:, i] &= completed[:, column[parent]]
    return completed


def _enumerate(graph: AovGraph, model: FailureModel) -> SimResult:
    g = _checked(graph)
    n = len(graph)
    if n > ENUMERATION_LIMIT:
        raise SimulationError(f"enumeration is limited to {ENUMERATION_LIMIT} subtasks, graph has {n}")
    order = list(nx.topological_sort(g))
    outcomes = np.arange(1 << n, dtype=np.int64)
    success = np.empty((outcomes.size, n), dtype=bool)
    weights = np.ones(outcomes.size)
    for i in range(n):
        success[:, i] = (outcomes >> i) & 1 == 1
        weights *= np.where(success[:, i], model.q, model.p_f)
    completed = _completion_matrix(g, order, success)
    per_column = np.array([weights[completed[:, i]].sum() for i in range(n)])
    per_node = {v: float(per_column[i]) for i, v in enumerate(order)}
    return SimResult(float(per_column.sum()), {v: per_node[v] for v in graph.vertices}, "enumeration")


def _monte_carlo(graph: AovGraph, model: FailureModel, trials: int, seed: int) -> SimResult:
    """Seeded trajectory trials in fixed-size chunks, each chunk with its own counter-based stream."""
    g = _checked(graph)
    order = list(nx.topological_sort(g))
    n = len(order)
    totals = np.zeros(n)
    count_sum = 0.0
    count_sq = 0.0
    for chunk, start in enumerate(range(0, trials, CHUNK_SIZE)):
        size = min(CHUNK_SIZE, trials - start)
        success = _stream(seed, chunk).random((size, n)) >= model.p_f
        completed = _completion_matrix(g, order, success)
        counts = completed.sum(axis=1, dtype=np.float64)
        totals += completed.sum(axis=0)
        count_sum += float(counts.sum())
        count_sq += float((counts**2).sum())

    mean = count_sum / trials
    variance = (count_sq - trials * mean * mean) / (trials - 1) if trials > 1 else 0.0
    std_error = math.sqrt(max(variance, 0.0) / trials)
    per_node = {v: float(totals[i] / trials) for i, v in enumerate(order)}
    return SimResult(mean, {v: per_node[v] for v in graph.vertices}, "monte_carlo", trials, std_error, seed)


def expected_completed(
    graph: AovGraph,
    model: FailureModel,
    method: Method = "recursion",
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> SimResult:
    if method == "recursion":
        per_node = success_probabilities_recursion(graph, model)
        return SimResult(sum(per_node.values()), per_node, "recursion")
    if method == "enumeration":
        return _enumerate(graph, model)
    if method == "monte_carlo":
        if trials < 1:
            raise SimulationError("trials must be at least 1")
        if seed < 0:
            raise SimulationError("seed must be nonnegative")
        return _monte_carlo(graph, model, trials, seed)
    raise SimulationError(f"unknown method {method!r}")


# -- graph construction --


def add_dependency(graph: AovGraph, b: str, v_star: str) -> AovGraph:
    """Return ``graph`` plus the edge ``b -> v_star``."""
    known = set(graph.vertices)
    for vertex in (b, v_star):
        if vertex not in known:
            raise SimulationError(f"unknown subtask {vertex!r}")
    if (b, v_star) in graph.edges:
        raise SimulationError(f"edge {b} -> {v_star} already present")
    if b == v_star or nx.has_path(graph.to_networkx(), v_star, b):
        raise SimulationError(f"edge {b} -> {v_star} would create a cycle")
    return graph.with_edge((b, v_star))


def _placeholder_graph(ids: list[str], edges: Iterable[tuple[str, str]]) -> AovGraph:
    role = AgentRole(DEFAULT_ROLE)
    return AovGraph.build({v: (f"Placeholder subtask {v}", role) for v in ids}, edges)


def _vertex_ids(n: int) -> list[str]:
    width = len(str(n))
    return [f"v{i:0{width}d}" for i in range(1, n + 1)]


def random_dag(spec: DagSpec) -> AovGraph:
    """Forward edges between ranked vertices, each kept with ``edge_probability``."""
    ids = _vertex_ids(spec.n)
    draws = _stream(spec.seed).random((spec.n, spec.n))
    edges = [
        (ids[i], ids[j]) for i in range(spec.n) for j in range(i + 1, spec.n) if draws[i, j] < spec.edge_probability
    ]
    return _placeholder_graph(ids, edges)


def random_out_forest(n: int, seed: int = 0, root_probability: float = 0.3) -> AovGraph:
    """Random forest with edges pointing away from the roots; every vertex has at most one parent."""
    if n < 1:
        raise SimulationError("n must be at least 1")
    ids = _vertex_ids(n)
    rng = _stream(seed)
    edges = []
    for i in range(1, n):
        if rng.random() >= root_probability:
            edges.append((ids[int(rng.integers(i))], ids[i]))
    return _placeholder_graph(ids, edges)


def admissible_edges(graph: AovGraph) -> list[tuple[str, str]]:
    """Every new edge that keeps ``graph`` acyclic, in sorted order."""
    g = graph.to_networkx()
    descendants = {v: nx.descendants(g, v) for v in g}
    return [
        (b, v)
        for b in sorted(g)
        for v in sorted(g)
        if b != v and (b, v) not in graph.edges and b not in descendants[v]
    ]


# -- edge-addition experiment --


@dataclass(frozen=True)
class PairResult:
    pair: int
    n: int
    p_f: float
    b: str
    v_star: str
    e_rec_a: float
    e_rec_b: float
    delta_vstar: float
    identity: float
    e_traj_a: float
    e_traj_b: float
    b_was_ancestor: bool
    mc_a: float | None = None
    mc_b: float | None = None
    mc_se_a: float | None = None
    mc_se_b: float | None = None

    @property
    def delta(self) -> float:
        return self.e_rec_a - self.e_rec_b

    def row(self) -> dict[str, object]:
        return {
            "pair": self.pair,
            "n": self.n,
            "p_f": self.p_f,
            "E_rec_A": self.e_rec_a,
            "E_rec_B": self.e_rec_b,
            "delta": self.delta,
            "mc_A": self.mc_a,
            "mc_B": self.mc_b,
            "mc_se_A": self.mc_se_a,
            "mc_se_B": self.mc_se_b,
            "b_was_ancestor": self.b_was_ancestor,
            "b": self.b,
            "v_star": self.v_star,
            "delta_vstar": self.delta_vstar,
            "E_traj_A": self.e_traj_a,
            "E_traj_B": self.e_traj_b,
        }


@dataclass
class ExperimentReport:
    spec: DagSpec
    model: FailureModel
    pairs: list[PairResult] = field(default_factory=list)
    skipped: dict[int, str] = field(default_factory=dict)

    @property
    def recursion_violations(self) -> list[int]:
        return [p.pair for p in self.pairs if not p.delta > 0]

    @property
    def trajectory_violations(self) -> list[int]:
        """Pairs that add a genuinely new ancestor yet do not lower the exact expectation."""
        return [p.pair for p in self.pairs if not p.b_was_ancestor and not p.e_traj_a > p.e_traj_b]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for pair in self.pairs:
            writer.writerow({k: "" if v is None else v for k, v in pair.row().items()})
        return buffer.getvalue()

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")

    def summary(self) -> str:
        lines = [
            f"edge-addition experiment: n={self.spec.n} edge_p={self.spec.edge_probability} "
            f"p_f={self.model.p_f} seed={self.spec.seed}",
            f"{'pairs run':<28}{len(self.pairs):>10}",
            f"{'pairs skipped':<28}{len(self.skipped):>10}",
        ]
        if self.pairs:
            deltas = np.array([p.delta for p in self.pairs])
            lines += [
                f"{'mean delta (recursion)':<28}{deltas.mean():>10.6f}",
                f"{'min delta (recursion)':<28}{deltas.min():>10.6f}",
                f"{'b already ancestor':<28}{sum(p.b_was_ancestor for p in self.pairs):>10}",
            ]
        lines += [
            f"{'recursion violations':<28}{len(self.recursion_violations):>10}",
            f"{'trajectory violations':<28}{len(self.trajectory_violations):>10}",
        ]
        for pair, note in sorted(self.skipped.items()):
            lines.append(f"skipped pair {pair}: {note}")
        return "\n".join(lines) + "\n"


def _base_graph(spec: DagSpec, pair: int) -> tuple[int, AovGraph, list[tuple[str, str]]] | None:
    """Draw pair ``pair``'s base graph, redrawing while it is a complete order.

    The first draw is keyed ``(seed, pair)``; redraw ``r`` is keyed ``(seed, pair, 0, r)``.
    """
    for attempt in range(REDRAW_LIMIT):
        key = [spec.seed, pair] if attempt == 0 else [spec.seed, pair, 0, attempt]
        graph_seed = int(np.random.SeedSequence(key).generate_state(1)[0])
        graph = random_dag(DagSpec(spec.n, spec.edge_probability, graph_seed))
        candidates = admissible_edges(graph)
        if candidates:
            if attempt:
                logger.debug("base graph redrawn", pair=pair, draws=attempt + 1)
            return graph_seed, graph, candidates
    return None


def edge_addition_experiment(
    spec: DagSpec, model: FailureModel, pairs: int, trials: int = DEFAULT_TRIALS
) -> ExperimentReport:
    """Add one admissible dependency to seeded random DAGs and compare expected completions.

    ``trials = 0`` skips the Monte Carlo estimates.
    """
    if pairs < 1:
        raise SimulationError("pairs must be at least 1")
    if trials < 0:
        raise SimulationError("trials must be nonnegative")

    report = ExperimentReport(spec, model)
    for pair in range(pairs):
        drawn = _base_graph(spec, pair)
        if drawn is None:
            report.skipped[pair] = "no admissible edge"
            logger.info("pair skipped", pair=pair, reason="no admissible edge", draws=REDRAW_LIMIT)
            continue
        graph_seed, graph_a, candidates = drawn
        b, v_star = candidates[int(_stream(spec.seed, pair, 1).integers(len(candidates)))]
        graph_b = add_dependency(graph_a, b, v_star)

        rec_a = success_probabilities_recursion(graph_a, model)
        rec_b = success_probabilities_recursion(graph_b, model)
        traj_a = trajectory_probabilities(graph_a, model)
        traj_b = trajectory_probabilities(graph_b, model)
        mc: dict[str, float | None] = {"mc_a": None, "mc_b": None, "mc_se_a": None, "mc_se_b": None}
        if trials:
            mc_a = expected_completed(graph_a, model, "monte_carlo", trials, graph_seed)
            mc_b = expected_completed(graph_b, model, "monte_carlo", trials, graph_seed)
            mc = {
                "mc_a": mc_a.expected_completed,
                "mc_b": mc_b.expected_completed,
                "mc_se_a": mc_a.std_error,
                "mc_se_b": mc_b.std_error,
            }

        report.pairs.append(
            PairResult(
                pair=pair,
                n=spec.n,
                p_f=model.p_f,
                b=b,
                v_star=v_star,
                e_rec_a=sum(rec_a.values()),
                e_rec_b=sum(rec_b.values()),
                delta_vstar=rec_a[v_star] - rec_b[v_star],
                identity=rec_a[v_star] * (1.0 - rec_a[b]),
                e_traj_a=sum(traj_a.values()),
                e_traj_b=sum(traj_b.values()),
                b_was_ancestor=b in nx.ancestors(graph_a.to_networkx(), v_star),
                **mc,
            )
        )

    for pair in report.recursion_violations:
        logger.warning("recursion expectation did not drop", pair=pair)
    for pair in report.trajectory_violations:
        logger.warning("trajectory expectation did not drop", pair=pair)
    return report


# -- masking ablation --


@dataclass(frozen=True)
class AblationRow:
    seed: int
    masked: str
    with_update: str
    without_update: str
    repair_round: int | None


@dataclass
class AblationReport:
    graph: str
    rows: list[AblationRow] = field(default_factory=list)
    skipped: dict[int, str] = field(default_factory=dict)

    def success_rate(self, arm: Literal["with_update", "without_update"]) -> float:
        if not self.rows:
            return 0.0
        return sum(getattr(r, arm) == "success" for r in self.rows) / len(self.rows)

    def summary(self) -> str:
        lines = [f"masking ablation on {self.graph}: {len(self.rows)} seeds"]
        for row in self.rows:
            repaired = f"round {row.repair_round}" if row.repair_round is not None else "-"
            lines.append(
                f"seed {row.seed:<4} mask {row.masked:<8} with update: {row.with_update:<17}"
                f"without update: {row.without_update:<17} repaired: {repaired}"
            )
        for seed, note in sorted(self.skipped.items()):
            lines.append(f"seed {seed:<4} skipped: {note}")
        lines.append(f"{'success rate with update':<28}{self.success_rate('with_update'):>8.0%}")
        lines.append(f"{'success rate without update':<28}{self.success_rate('without_update'):>8.0%}")
        return "\n".join(lines) + "\n"


def repair_round(events: Iterable[RunEvent]) -> int | None:
    """Refinement round in which the first structural update was merged."""
    rounds = 0
    for event in events:
        if event["event"] in ("no_change", "update_merged"):
            rounds += 1
        if event["event"] == "update_merged":
            return rounds
    return None


def _ablation_case(mode: Literal["fixture", "random"], seed: int, n: int) -> tuple[str, str] | None:
    """Snapshot text and the subtask to mask, or None when the graph has no blocking subtask.

    The masked subtask is drawn from the stream ``(seed, 2)`` among subtasks with a child.
    """
    if mode == "fixture":
        state = WorkflowState.from_json((FIXTURES_DIR / "workflows" / "w1.json").read_text(encoding="utf-8"))
        graph = state.to_graph()
    else:
        graph = random_dag(DagSpec(n, 0.5, seed))
        state = WorkflowState.from_graph(graph, goal="ablation")
    blocking = sorted({u for u, _v in graph.edges})
    if not blocking:
        return None
    masked = blocking[int(_stream(seed, 2).integers(len(blocking)))]
    return state.to_json(), masked


async def run_ablation(
    seeds: int,
    mode: Literal["fixture", "random"] = "fixture",
    n: int = 8,
    config: ExecutorConfig | None = None,
    first_seed: int = 0,
) -> AblationReport:
    """Run seeds ``first_seed .. first_seed + seeds - 1`` with and without refinement.

    Each seed masks one subtask that blocks a descendant.
    """
    if seeds < 1:
        raise SimulationError("seeds must be at least 1")
    if first_seed < 0:
        raise SimulationError("seed must be nonnegative")
    base = config or ExecutorConfig()
    task = TaskSpec("Masking ablation")
    report = AblationReport("Workflow 1" if mode == "fixture" else f"random DAGs, n={n}")
    for seed in range(first_seed, first_seed + seeds):
        case = _ablation_case(mode, seed, n)
        if case is None:
            report.skipped[seed] = "no subtask with a descendant"
            continue
        snapshot, masked = case
        outcomes = {}
        rounds = None
        for arm, budget in (("with_update", max(base.max_refinement_rounds, 1)), ("without_update", 0)):
            result = await run_workflow(
                task,
                MockPlanner([snapshot]),
                StubBackend(),
                replace(base, max_refinement_rounds=budget, verify_completions=True),
                FaultInjector({masked}, seed=seed),
                PlannerConfig(k=1),
            )
            outcomes[arm] = result.outcome
            if arm == "with_update":
                rounds = repair_round(result.events)
        report.rows.append(AblationRow(seed, masked, outcomes["with_update"], outcomes["without_update"], rounds))
        logger.info("ablation seed finished", seed=seed, masked=masked, **outcomes)
    return report
