import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindgraph.graph import (
    GraphError, NoPathError, build_graph, cost_to_goals, generate_synthetic_graph, graph_from_dict,
    k_shortest_paths, load_graph, path_length, reachable_from, save_graph, shortest_path,
)
from oracles import all_simple_paths


def small_graph(n, edges, goals=(0,)):
    return build_graph(np.arange(n, dtype=float), np.zeros(n), [e[0] for e in edges],
                       [e[1] for e in edges], [e[2] for e in edges], list(goals))


FOUR = [(0, 1, 1.0), (1, 3, 1.0), (0, 2, 3.0), (2, 3, 0.5)]


def random_graph(rng, n, p):
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < p:
                # integer-valued lengths make exact ties common
                edges.append((u, v, float(rng.integers(1, 5))))
    if not edges:
        edges.append((0, 1, 1.0))
    return small_graph(n, edges, goals=(0,)), edges


def min_edges(edges):
    best = {}
    for u, v, ln in edges:
        best[(u, v)] = min(ln, best.get((u, v), math.inf))
    return best


# ---------------------------------------------------------------- loading

def test_triangle_file_bidirectional(tmp_path):
    doc = {
        "nodes": [{"id": i, "x": float(i), "y": 0.0} for i in range(3)],
        "edges": [{"src": a, "dst": b, "length": 1.0} for a in range(3) for b in range(3) if a != b],
        "goals": [2],
    }
    p = tmp_path / "tri.json"
    p.write_text(json.dumps(doc))
    g = load_graph(p)
    assert (g.num_nodes, g.num_edges, g.goals) == (3, 6, (2,))


def test_bidirectional_flag_expands():
    doc = {"nodes": [{"id": 0, "x": 0, "y": 0}, {"id": 1, "x": 1, "y": 0}],
           "edges": [{"src": 0, "dst": 1, "length": 2.0, "bidirectional": True}], "goals": [0, 1]}
    g = graph_from_dict(doc)
    assert g.num_edges == 2 and g.has_edge(1, 0)


@pytest.mark.parametrize("doc, fragment", [
    ({"nodes": [{"id": i, "x": 0, "y": 0} for i in range(3)],
      "edges": [{"src": 0, "dst": 99, "length": 1}], "goals": [0]}, "edges[0]: dst 99"),
    ({"nodes": [{"id": 0, "x": 0, "y": 0}, {"id": 1, "x": 0, "y": 0}],
      "edges": [{"src": 0, "dst": 1, "length": 0}], "goals": [0]}, "length must be positive"),
    ({"nodes": [{"id": 0, "x": 0, "y": 0}], "edges": [], "goals": []}, "goal"),
    ({"nodes": [], "edges": [], "goals": [0], "extra": 1}, "unknown top-level"),
])
def test_load_errors_name_location(tmp_path, doc, fragment):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(GraphError, match="bad.json") as exc:
        load_graph(p)
    assert fragment in str(exc.value)


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"nodes": [\n  oops ]}')
    with pytest.raises(GraphError, match="line 2"):
        load_graph(p)


def test_save_load_round_trip(tmp_path):
    g = generate_synthetic_graph(5, 4, 0.3, 0.2, 3, seed=4)
    h = load_graph(save_graph(g, tmp_path / "g.json"))
    assert h.content_hash() == g.content_hash()
    assert sorted(zip(h.src, h.dst, h.length)) == sorted(zip(g.src, g.dst, g.length))
    assert load_graph(save_graph(h, tmp_path / "g2.json")).content_hash() == g.content_hash()


def test_geographic_nodes_projected():
    doc = {"nodes": [{"id": 0, "lon": 0.0, "lat": 0.0}, {"id": 1, "lon": 0.001, "lat": 0.0}],
           "edges": [{"src": 0, "dst": 1, "length": 111.0}], "goals": [1]}
    g = graph_from_dict(doc)
    assert abs(abs(g.x[1] - g.x[0]) - 111.19) < 0.1


# ---------------------------------------------------------------- generation

def test_synthetic_two_by_two():
    g = generate_synthetic_graph(2, 2, 0.0, 0.0, 2, seed=7)
    assert (g.num_nodes, g.num_edges) == (4, 8)
    assert len(set(g.goals)) == 2


def test_synthetic_deterministic():
    a = generate_synthetic_graph(6, 5, 0.2, 0.3, 4, seed=11)
    b = generate_synthetic_graph(6, 5, 0.2, 0.3, 4, seed=11)
    assert a.content_hash() == b.content_hash()
    assert np.array_equal(a.x, b.x) and np.array_equal(a.length, b.length)


def test_synthetic_strongly_connected():
    g = generate_synthetic_graph(10, 10, 0.0, 0.25, 5, seed=2)
    everything = set(range(g.num_nodes))
    assert reachable_from(g, 0) == everything
    assert reachable_from(g, 0, reverse=True) == everything


def test_synthetic_infeasible_goals():
    with pytest.raises(GraphError):
        generate_synthetic_graph(2, 2, num_goals=5)


# ---------------------------------------------------------------- paths

def test_shortest_path_same_node():
    g = small_graph(4, FOUR)
    assert shortest_path(g, 2, 2) == shortest_path(g, 2, 2).__class__((2,), 0.0)


def test_shortest_path_four_node():
    r = shortest_path(small_graph(4, FOUR), 0, 3)
    assert r.nodes == (0, 1, 3) and r.length == 2.0


def test_k_shortest_four_node_only_two_exist():
    out = k_shortest_paths(small_graph(4, FOUR), 0, 3, 3)
    assert [(p.nodes, p.length) for p in out] == [((0, 1, 3), 2.0), ((0, 2, 3), 3.5)]


def test_k1_equals_shortest():
    g = generate_synthetic_graph(5, 5, 0.3, 0.2, 2, seed=1)
    assert k_shortest_paths(g, 0, 24, 1) == [shortest_path(g, 0, 24)]


def test_no_path_error():
    g = small_graph(3, [(0, 1, 1.0), (1, 0, 1.0)])
    with pytest.raises(NoPathError):
        shortest_path(g, 0, 2)
    with pytest.raises(NoPathError):
        k_shortest_paths(g, 0, 2, 3)


def test_lexicographic_tie_break():
    # two equal-length routes 0-1-3 and 0-2-3
    g = small_graph(4, [(0, 2, 1.0), (2, 3, 1.0), (0, 1, 1.0), (1, 3, 1.0)])
    assert shortest_path(g, 0, 3).nodes == (0, 1, 3)


def test_oracle_equivalence_random_small_graphs():
    rng = np.random.default_rng(20)
    for _ in range(200):
        n = int(rng.integers(2, 9))
        g, edges = random_graph(rng, n, float(rng.uniform(0.2, 0.6)))
        best = min_edges(edges)
        for src in range(n):
            for dst in range(n):
                if src == dst:
                    continue
                truth = all_simple_paths(best, n, src, dst)
                if not truth:
                    with pytest.raises(NoPathError):
                        shortest_path(g, src, dst)
                    continue
                assert shortest_path(g, src, dst) .nodes == truth[0][1]
                k = int(rng.integers(1, 6))
                got = [(p.length, p.nodes) for p in k_shortest_paths(g, src, dst, k)]
                assert got == truth[:k]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_k_paths_properties(seed, k):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, 7, 0.35)
    try:
        out = k_shortest_paths(g, 0, 6, k)
    except NoPathError:
        return
    lengths = [p.length for p in out]
    assert lengths == sorted(lengths) and len(out) <= k
    for p in out:
        assert len(set(p.nodes)) == len(p.nodes)
        assert abs(path_length(g, p.nodes) - p.length) <= 1e-9 * max(1.0, p.length)
    assert len({p.nodes for p in out}) == len(out)


def test_cost_to_goals_matches_shortest_path():
    g = generate_synthetic_graph(5, 4, 0.3, 0.2, 3, seed=9)
    C = cost_to_goals(g)
    for gi, goal in enumerate(g.goals):
        for v in range(g.num_nodes):
            assert C[gi, v] == pytest.approx(shortest_path(g, v, goal).length, rel=1e-12)


def test_cost_to_goals_unreachable_is_inf():
    g = small_graph(3, [(0, 1, 1.0)], goals=(1, 2))
    C = cost_to_goals(g)
    assert C[0, 0] == 1.0 and math.isinf(C[1, 0]) and math.isinf(C[0, 2])
