"""Property-based tests for graph leveling, metrics and selection."""

from __future__ import annotations

import random

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aov_flow.graph import (
    AovGraph,
    dependency_complexity,
    graph_metrics,
    select_candidate,
    topological_levels,
    validate,
)

from .conftest import make_graph


@st.composite
def dags(draw: st.DrawFn, max_vertices: int = 10) -> AovGraph:
    n = draw(st.integers(min_value=1, max_value=max_vertices))
    ids = [f"t{i}" for i in range(n)]
    pairs = [(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)]
    keep = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    shuffled = draw(st.permutations(ids))
    return make_graph([p for p, k in zip(pairs, keep, strict=True) if k], ids=shuffled)


class TestLevelProperties:
    @given(dags())
    def test_forward_edges_are_valid(self, graph: AovGraph) -> None:
        assert validate(graph).ok

    @given(dags())
    def test_levels_partition_vertices(self, graph: AovGraph) -> None:
        plan = topological_levels(graph)
        seen = [v for level in plan.levels for v in level]
        assert sorted(seen) == sorted(graph.vertices)
        assert all(level for level in plan.levels)

    @given(dags())
    def test_edges_point_to_later_levels(self, graph: AovGraph) -> None:
        plan = topological_levels(graph)
        for u, v in graph.edges:
            assert plan.level_index(u) < plan.level_index(v)

    @given(dags())
    def test_parallelism_times_levels_is_vertex_count(self, graph: AovGraph) -> None:
        metrics = graph_metrics(graph)
        assert metrics.parallelism_avg * metrics.level_count == pytest.approx(len(graph))
        assert metrics.dependency_complexity >= 0.0
        assert metrics.mean_degree == pytest.approx(2 * len(graph.edges) / len(graph))


class TestSelectionProperties:
    @settings(max_examples=50)
    @given(st.lists(dags(max_vertices=6), min_size=1, max_size=5))
    def test_winner_has_maximal_parallelism(self, graphs: list[AovGraph]) -> None:
        report = select_candidate(graphs)
        best = max(m.parallelism_avg for m in report.metrics if m is not None)
        winner = report.metrics[report.index]
        assert winner is not None
        assert winner.parallelism_avg == pytest.approx(best, abs=1e-9)

    @settings(max_examples=50)
    @given(dags(max_vertices=6))
    def test_duplicate_candidates_pick_first(self, graph: AovGraph) -> None:
        assert select_candidate([graph, graph]).index == 0


class TestMetricInvariants:
    @given(dags(), st.randoms(use_true_random=False))
    def test_relabeling_keeps_metrics(self, graph: AovGraph, rnd: random.Random) -> None:
        fresh = [f"n{i}" for i in range(len(graph))]
        rnd.shuffle(fresh)
        rename = dict(zip(graph.vertices, fresh, strict=True))
        edges = [(rename[u], rename[v]) for u, v in graph.edges]
        relabeled = make_graph(edges, ids=[rename[v] for v in graph.vertices])

        assert dependency_complexity(relabeled) == pytest.approx(dependency_complexity(graph), abs=1e-12)
        assert topological_levels(relabeled).level_count == topological_levels(graph).level_count

    @given(dags(), st.data())
    def test_removing_an_edge_never_adds_levels(self, graph: AovGraph, data: st.DataObject) -> None:
        assume(graph.edges)
        edge = data.draw(st.sampled_from(sorted(graph.edges)))
        before = topological_levels(graph).level_count
        assert topological_levels(graph.without_edge(edge)).level_count <= before
