import logging

import networkx as nx
import numpy as np
import pytest

from app.errors import GraphFormatError, InvalidNodeError
from app.services.graph_core import (
    ego_subgraph,
    from_edges,
    induced_distance_matrix,
    k_core_numbers,
    load_graph,
    observed_diameter,
    percentile_transform,
    save_graph,
    shortest_path_len,
    synthetic_two_community,
)


def peeling_cores(n, edges):
    adj = {v: set() for v in range(n)}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    cores = [0] * n
    alive = set(range(n))
    k = 0
    while alive:
        v = min(alive, key=lambda x: (len(adj[x] & alive), x))
        k = max(k, len(adj[v] & alive))
        cores[v] = k
        alive.remove(v)
    return cores


def floyd_warshall(n, edges):
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v in edges:
        dist[u, v] = dist[v, u] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
    return dist


def test_core_numbers_match_peeling_oracle():
    rng = np.random.default_rng(0)
    for trial in range(200):
        p = float(rng.uniform(0.1, 0.7))
        edges = list(nx.gnp_random_graph(10, p, seed=trial).edges())
        g = from_edges(10, edges)
        assert k_core_numbers(g).tolist() == peeling_cores(10, edges)


def test_isolated_nodes_have_core_zero():
    g = from_edges(4, [(0, 1)])
    assert k_core_numbers(g).tolist() == [1, 1, 0, 0]


def test_distances_match_floyd_warshall():
    rng = np.random.default_rng(1)
    for trial in range(50):
        n = int(rng.integers(2, 13))
        edges = list(nx.gnp_random_graph(n, float(rng.uniform(0.05, 0.5)), seed=trial).edges())
        g = from_edges(n, edges)
        expected = floyd_warshall(n, edges)
        assert np.array_equal(g.distance_matrix(), expected)
        u, v = int(rng.integers(n)), int(rng.integers(n))
        hops = shortest_path_len(g, u, v)
        if np.isinf(expected[u, v]):
            assert hops is None
        else:
            assert hops == expected[u, v]


@pytest.mark.parametrize("bad", [-1, 4, True, 1.5, "2"])
def test_check_node_rejects_invalid_ids(path_graph, bad):
    with pytest.raises(InvalidNodeError):
        path_graph.check_node(bad)


def test_ego_subgraph_of_path_middle(path_graph):
    ego = ego_subgraph(path_graph, 1)
    assert ego.center == 1
    assert ego.ordered_members == [0, 1, 2]
    assert ego.edges == ((0, 1), (1, 2))
    assert ego.feature_view.shape == (3, 1)


def test_percentile_transform_shares_ties():
    assert percentile_transform(np.array([1.0, 1.0, 2.0])).tolist() == pytest.approx([0.25, 0.25, 1.0])
    assert percentile_transform(np.array([3.0])).tolist() == [1.0]


def test_observed_diameter(path_graph):
    assert observed_diameter(path_graph, range(4)) == 3
    assert observed_diameter(path_graph, [0, 3]) == 0


def test_induced_distances_ignore_hidden_shortcuts(path_graph):
    dist = induced_distance_matrix(path_graph, [0, 1, 3])
    assert dist[0, 1] == dist[1, 0] == 1
    assert dist[3, 3] == 0
    assert np.isinf(dist[0, 3]) and np.isinf(dist[2, 2])
    assert dist.shape == (4, 4)


def _write(tmp_path, edges, features, labels=None):
    (tmp_path / "edges.txt").write_text(edges, encoding="utf-8")
    (tmp_path / "features.txt").write_text(features, encoding="utf-8")
    if labels is not None:
        (tmp_path / "labels.txt").write_text(labels, encoding="utf-8")
    return tmp_path / "edges.txt", tmp_path / "features.txt", (tmp_path / "labels.txt") if labels else None


def test_load_graph_folds_reversed_edges(tmp_path, caplog):
    paths = _write(tmp_path, "# toy\n0\t1\n1\t0\n1\t2\n2\t1\n0\t2\n", "1,0\n0,1\n1,1\n", "0\n1\n1\n")
    with caplog.at_level(logging.INFO, logger="app.services.graph_core"):
        g = load_graph(*paths)
    assert "Folded 2 reversed edge lines" in caplog.text
    assert g.node_count == 3 and g.edge_count == 3
    assert g.edges() == [(0, 1), (0, 2), (1, 2)]
    assert g.class_count == 2


def test_load_graph_reports_self_loop_line(tmp_path):
    paths = _write(tmp_path, "0\t1\n# comment\n2\t2\n", "1\n1\n1\n")
    with pytest.raises(GraphFormatError) as exc:
        load_graph(*paths)
    assert exc.value.line_number == 3


def test_load_graph_rejects_duplicate_edge(tmp_path):
    paths = _write(tmp_path, "0\t1\n0\t1\n", "1\n1\n")
    with pytest.raises(GraphFormatError) as exc:
        load_graph(*paths)
    assert exc.value.line_number == 2


def test_load_graph_rejects_ragged_features(tmp_path):
    paths = _write(tmp_path, "0\t1\n", "1,2\n3\n")
    with pytest.raises(GraphFormatError) as exc:
        load_graph(*paths)
    assert exc.value.line_number == 2


def test_load_graph_rejects_out_of_range_edge(tmp_path):
    paths = _write(tmp_path, "0\t5\n", "1\n1\n")
    with pytest.raises(GraphFormatError):
        load_graph(*paths)


def test_save_then_load_keeps_graph(tmp_path):
    g = synthetic_two_community(node_count=20, feature_dim=3, seed=4)
    save_graph(g, tmp_path / "e.txt", tmp_path / "f.txt", tmp_path / "l.txt")
    loaded = load_graph(tmp_path / "e.txt", tmp_path / "f.txt", tmp_path / "l.txt")
    assert loaded.edges() == g.edges()
    assert np.array_equal(loaded.features, g.features)
    assert np.array_equal(loaded.labels, g.labels)


def test_synthetic_graph_is_seeded():
    a = synthetic_two_community(node_count=40, seed=3)
    b = synthetic_two_community(node_count=40, seed=3)
    assert a.edges() == b.edges()
    assert np.array_equal(a.features, b.features)
    assert sorted(set(a.labels.tolist())) == [0, 1]


def test_core_numbers_never_grow_when_an_edge_is_removed():
    rng = np.random.default_rng(2)
    for trial in range(50):
        edges = list(nx.gnp_random_graph(12, float(rng.uniform(0.2, 0.6)), seed=trial).edges())
        if not edges:
            continue
        before = k_core_numbers(from_edges(12, edges))
        drop = int(rng.integers(len(edges)))
        after = k_core_numbers(from_edges(12, edges[:drop] + edges[drop + 1:]))
        assert (after <= before).all()


def test_ego_subgraph_holds_center_and_neighbors(toy_graph):
    for v in range(toy_graph.node_count):
        ego = ego_subgraph(toy_graph, v)
        assert len(ego.members) == toy_graph.degree(v) + 1
        assert ego.feature_view.shape == (toy_graph.degree(v) + 1, toy_graph.feature_dim)


def test_shortest_path_len_is_a_metric():
    g = from_edges(9, list(nx.gnp_random_graph(9, 0.35, seed=7).edges()) + [(0, 8)])
    nodes = range(g.node_count)
    for u in nodes:
        assert shortest_path_len(g, u, u) == 0
        for v in nodes:
            d_uv = shortest_path_len(g, u, v)
            assert d_uv == shortest_path_len(g, v, u)
            if d_uv is None:
                continue
            for w in nodes:
                d_uw, d_wv = shortest_path_len(g, u, w), shortest_path_len(g, w, v)
                if d_uw is not None and d_wv is not None:
                    assert d_uv <= d_uw + d_wv
