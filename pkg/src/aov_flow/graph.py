"""AOV workflow graphs: validation, topological leveling, modularity metrics and candidate selection."""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Literal

import networkx as nx
import numpy as np
import structlog

from .errors import GraphValidationError, SelectionError

logger = structlog.get_logger(__name__)

# Absolute tolerance when comparing metrics between candidates.
METRIC_TOLERANCE = 1e-9

ViolationKind = Literal["cycle", "dangling_endpoint", "missing_agent", "missing_requirement", "duplicate_id"]


@dataclass(frozen=True)
class AgentRole:
    """An agent role; the name is the join key between graphs and running agent instances."""

    name: str
    persona: str = ""


@dataclass(frozen=True, eq=True)
class AovGraph:
    """Immutable activity-on-vertex graph.

    ``vertices`` keeps insertion order and may hold duplicates so that
    ``validate`` can report them; every other operation assumes a valid graph.
    """

    vertices: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    agent_of: Mapping[str, AgentRole] = field(default_factory=dict)
    requirement_of: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", frozenset(self.edges))
        object.__setattr__(self, "agent_of", MappingProxyType(dict(self.agent_of)))
        object.__setattr__(self, "requirement_of", MappingProxyType(dict(self.requirement_of)))

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def build(
        cls,
        tasks: Mapping[str, tuple[str, str | AgentRole]],
        edges: Iterable[tuple[str, str]] = (),
    ) -> AovGraph:
        """Build a graph from ``{id: (requirement, role)}`` and an edge list."""
        agents: dict[str, AgentRole] = {}
        requirements: dict[str, str] = {}
        for task_id, (requirement, role) in tasks.items():
            requirements[task_id] = requirement
            agents[task_id] = role if isinstance(role, AgentRole) else AgentRole(role)
        return cls(tuple(tasks), frozenset(edges), agents, requirements)

    def __len__(self) -> int:
        return len(set(self.vertices))

    def parents(self, vertex: str) -> list[str]:
        return sorted(u for u, v in self.edges if v == vertex)

    def children(self, vertex: str) -> list[str]:
        return sorted(v for u, v in self.edges if u == vertex)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.vertices)
        graph.add_edges_from(self.edges)
        return graph

    def with_edge(self, edge: tuple[str, str]) -> AovGraph:
        return AovGraph(self.vertices, self.edges | {edge}, self.agent_of, self.requirement_of)

    def without_edge(self, edge: tuple[str, str]) -> AovGraph:
        return AovGraph(self.vertices, self.edges - {edge}, self.agent_of, self.requirement_of)


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    subject: tuple[str, ...]
    detail: str = ""

    def __str__(self) -> str:
        if self.kind == "cycle":
            return "cycle " + " -> ".join([*self.subject, self.subject[0]])
        text = f"{self.kind.replace('_', '-')}({', '.join(self.subject)})"
        return f"{text}: {self.detail}" if self.detail else text


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def of_kind(self, kind: ViolationKind) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def raise_for_violations(self) -> None:
        if self.violations:
            raise GraphValidationError(self)


@dataclass(frozen=True)
class ExecutionPlan:
    """Levels of mutually independent subtasks plus a consistent linear order (1-based)."""

    levels: tuple[frozenset[str], ...]
    order: Mapping[str, int]

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def level_index(self, vertex: str) -> int:
        for index, level in enumerate(self.levels):
            if vertex in level:
                return index
        raise KeyError(vertex)


@dataclass(frozen=True)
class GraphMetrics:
    parallelism_avg: float
    dependency_complexity: float
    level_count: int
    mean_degree: float

    def as_dict(self) -> dict[str, float | int]:
        return {
            "P_avg": self.parallelism_avg,
            "C_dependency": self.dependency_complexity,
            "T": self.level_count,
            "mean_degree": self.mean_degree,
        }


@dataclass(frozen=True)
class SelectionReport:
    """Outcome of candidate selection; ``metrics[i]`` is None for dropped candidates."""

    index: int
    metrics: tuple[GraphMetrics | None, ...]
    dropped: Mapping[int, str] = field(default_factory=dict)


def validate(graph: AovGraph) -> ValidationReport:
    """Report every structural problem in ``graph``; never raises."""
    violations: list[Violation] = []

    counts = Counter(graph.vertices)
    for vertex, count in counts.items():
        if count > 1:
            violations.append(Violation("duplicate_id", (vertex,), f"appears {count} times"))

    known = set(counts)
    for u, v in sorted(graph.edges):
        for endpoint in (u, v):
            if endpoint not in known:
                violations.append(Violation("dangling_endpoint", (endpoint,), f"edge {u} -> {v}"))

    for vertex in sorted(known):
        role = graph.agent_of.get(vertex)
        if role is None or not role.name.strip():
            violations.append(Violation("missing_agent", (vertex,)))
        requirement = graph.requirement_of.get(vertex)
        if requirement is None or not requirement.strip():
            violations.append(Violation("missing_requirement", (vertex,)))

    try:
        witness = nx.find_cycle(graph.to_networkx())
    except nx.NetworkXNoCycle:
        pass
    else:
        violations.append(Violation("cycle", tuple(u for u, _v in witness)))

    return ValidationReport(tuple(violations))


def topological_levels(graph: AovGraph) -> ExecutionPlan:
    """Earliest-start leveling: a vertex sits one level below its deepest parent."""
    validate(graph).raise_for_violations()
    levels = tuple(frozenset(gen) for gen in nx.topological_generations(graph.to_networkx()))
    order: dict[str, int] = {}
    for level in levels:
        for vertex in sorted(level):
            order[vertex] = len(order) + 1
    return ExecutionPlan(levels, MappingProxyType(order))


def degrees(graph: AovGraph) -> dict[str, int]:
    """Total (in + out) degree per vertex."""
    result = dict.fromkeys(graph.vertices, 0)
    for u, v in graph.edges:
        result[u] += 1
        result[v] += 1
    return result


def parallelism_average(graph: AovGraph) -> float:
    plan = topological_levels(graph)
    if plan.level_count == 0:
        logger.warning("empty graph", metric="P_avg")
        return 0.0
    return sum(len(level) for level in plan.levels) / plan.level_count


def dependency_complexity(graph: AovGraph) -> float:
    """Population standard deviation of total vertex degree."""
    validate(graph).raise_for_violations()
    if len(graph) == 0:
        logger.warning("empty graph", metric="C_dependency")
        return 0.0
    return float(np.std(np.fromiter(degrees(graph).values(), dtype=float)))


def graph_metrics(graph: AovGraph) -> GraphMetrics:
    plan = topological_levels(graph)
    if plan.level_count == 0:
        logger.warning("empty graph", metric="all")
        return GraphMetrics(0.0, 0.0, 0, 0.0)
    values = np.fromiter(degrees(graph).values(), dtype=float)
    return GraphMetrics(
        parallelism_avg=len(graph) / plan.level_count,
        dependency_complexity=float(np.std(values)),
        level_count=plan.level_count,
        mean_degree=float(values.mean()),
    )


def _beats(candidate: GraphMetrics, best: GraphMetrics) -> bool:
    if candidate.parallelism_avg > best.parallelism_avg + METRIC_TOLERANCE:
        return True
    if abs(candidate.parallelism_avg - best.parallelism_avg) <= METRIC_TOLERANCE:
        return candidate.dependency_complexity < best.dependency_complexity - METRIC_TOLERANCE
    return False


def select_candidate(candidates: Sequence[AovGraph]) -> SelectionReport:
    """Pick the highest-parallelism candidate, then lowest dependency complexity, then lowest index.

    Invalid candidates are dropped with a warning before selection.
    """
    if not candidates:
        raise SelectionError("no candidates to select from")

    metrics: list[GraphMetrics | None] = []
    dropped: dict[int, str] = {}
    best: int | None = None
    for index, candidate in enumerate(candidates):
        report = validate(candidate)
        if not report.ok:
            reason = "; ".join(str(v) for v in report.violations)
            logger.warning("candidate dropped", index=index, reason=reason)
            metrics.append(None)
            dropped[index] = reason
            continue
        current = graph_metrics(candidate)
        metrics.append(current)
        best_metrics = metrics[best] if best is not None else None
        if best_metrics is None or _beats(current, best_metrics):
            best = index

    if best is None:
        raise SelectionError(f"all {len(candidates)} candidates are invalid")
    return SelectionReport(best, tuple(metrics), MappingProxyType(dropped))
