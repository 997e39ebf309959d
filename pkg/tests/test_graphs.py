"""Graph structure, adjacency orientation, windows, and text round-trips."""

import math
from collections import deque

import numpy as np
import pytest

from expgnn.graphs import (AdjMatrix, Graph, ParseError, adjacency,
                           expand_window, from_text, permute, to_text,
                           window_sequence)


def bfs_dist(edges: set, n: int, src: int) -> list:
    """Directed hop counts from src; independent of the window code."""
    out = [[] for _ in range(n)]
    for (u, v, _) in edges:
        out[u].append(v)
    dist = [math.inf] * n
    dist[src] = 0
    q = deque([src])
    while q:
        u = q.popleft()
        for v in out[u]:
            if dist[v] == math.inf:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def random_graph(rng, n: int) -> Graph:
    edges = set()
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < 0.15:
                edges.add((u, v, 0))
    return Graph(n, (0,) * n, frozenset(edges))


# --- construction validation -------------------------------------------------


def test_rejects_self_loop():
    with pytest.raises(ValueError, match="self-loop"):
        Graph(2, (0, 0), frozenset({(0, 0, 0)}))


def test_rejects_out_of_range_endpoint():
    with pytest.raises(ValueError, match="out of range"):
        Graph(2, (0, 0), frozenset({(0, 2, 0)}))


def test_rejects_label_count_mismatch():
    with pytest.raises(ValueError, match="node labels"):
        Graph(3, (0, 0), frozenset())


def test_symmetric_flag_is_validated():
    with pytest.raises(ValueError, match="reverse"):
        Graph(2, (0, 0), frozenset({(0, 1, 0)}), symmetric=True)
    Graph(2, (0, 0), frozenset({(0, 1, 0), (1, 0, 0)}), symmetric=True)


def test_multi_label_parallel_edges_allowed():
    g = Graph(2, (0, 0), frozenset({(0, 1, 0), (0, 1, 1)}))
    assert len(g.edges) == 2
    assert g.edge_labels == (0, 1)


# --- adjacency orientation ----------------------------------------------------


def test_adjacency_edgeless():
    g = Graph(3, (0, 0, 0), frozenset())
    assert not adjacency(g).bits.any()


def test_adjacency_single_edge_orientation():
    g = Graph(2, (0, 0), frozenset({(0, 1, 0)}))
    a = adjacency(g)
    # row = destination, column = source
    assert a.bits[1, 0] and not a.bits[0, 1]
    r = adjacency(g, reverse=True)
    assert r.bits[0, 1] and not r.bits[1, 0]


def test_adjacency_label_filter():
    g = Graph(3, (0, 0, 0), frozenset({(0, 1, 0), (1, 2, 1)}))
    a0 = adjacency(g, edge_label=0)
    assert a0.bits[1, 0] and not a0.bits[2, 1]
    a1 = adjacency(g, edge_label=1)
    assert a1.bits[2, 1] and not a1.bits[1, 0]


def test_adjmatrix_is_immutable():
    a = adjacency(Graph(2, (0, 0), frozenset({(0, 1, 0)})))
    with pytest.raises(ValueError):
        a.bits[0, 0] = True


# --- windows -------------------------------------------------------------------


def test_expand_window_zero_and_identity():
    z = AdjMatrix(3, np.zeros((3, 3), dtype=bool))
    assert not expand_window(z).bits.any()
    eye = AdjMatrix(3, np.eye(3, dtype=bool))
    np.testing.assert_array_equal(expand_window(eye).bits, eye.bits)


def test_expand_window_monotone():
    rng = np.random.default_rng(3)
    a = AdjMatrix(8, rng.random((8, 8)) < 0.2)
    out = expand_window(a)
    assert (out.bits | a.bits == out.bits).all()


def test_expand_window_fixed_point_at_log_n():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 24))
        a = AdjMatrix(n, rng.random((n, n)) < 0.2)
        k = math.ceil(math.log2(n))
        cur = a
        for _ in range(k):
            cur = expand_window(cur)
        again = expand_window(cur)
        np.testing.assert_array_equal(again.bits, cur.bits)


def test_directed_path_window_level_1():
    edges = frozenset({(i, i + 1, 0) for i in range(4)})
    g = Graph(5, (0,) * 5, edges)
    w = expand_window(adjacency(g))
    for i in range(5):
        for j in range(5):
            assert w.bits[i, j] == (1 <= i - j <= 2)


def test_cycle_window_saturates():
    edges = frozenset({(i, (i + 1) % 8, 0) for i in range(8)})
    g = Graph(8, (0,) * 8, edges)
    seq = window_sequence(adjacency(g), 4)
    # window k reaches length 2**k; the 8-cycle closes at level 3
    assert seq[3].bits.all()
    assert not seq[2].bits.diagonal().any()


def test_window_sequence_needs_a_layer():
    with pytest.raises(ValueError):
        window_sequence(AdjMatrix(2, np.zeros((2, 2), dtype=bool)), 0)


def test_disjoint_components_never_connect():
    edges = frozenset({(0, 1, 0), (2, 3, 0)})
    g = Graph(4, (0,) * 4, edges)
    top = window_sequence(adjacency(g), 5)[-1]
    assert not top.bits[2:, :2].any() and not top.bits[:2, 2:].any()


def test_windows_match_bfs_on_random_digraphs():
    rng = np.random.default_rng(7)
    for _ in range(40):
        n = int(rng.integers(2, 20))
        g = random_graph(rng, n)
        seq = window_sequence(adjacency(g), 4)
        dist = [bfs_dist(set(g.edges), n, s) for s in range(n)]
        for k, w in enumerate(seq):
            reach = 2 ** k
            for i in range(n):
                for j in range(n):
                    # bit (i, j): walk j -> i of length in [1, 2**k];
                    # closed walks can light the diagonal
                    if i == j:
                        expected = any(
                            dist[j][t] + dist[t][j] <= reach
                            for t in range(n) if t != j
                            if dist[j][t] + dist[t][j] >= 1)
                    else:
                        expected = 1 <= dist[j][i] <= reach
                    assert w.bits[i, j] == expected, (n, k, i, j)


# --- permutation ---------------------------------------------------------------


def test_permute_identity_and_inverse():
    g = Graph(4, (0, 1, 2, 3), frozenset({(0, 1, 0), (1, 2, 1), (3, 0, 0)}))
    assert permute(g, (0, 1, 2, 3)) == g
    perm = (2, 0, 3, 1)
    inv = tuple(np.argsort(perm))
    assert permute(permute(g, perm), inv) == g


def test_permute_rejects_non_bijection():
    g = Graph(3, (0, 0, 0), frozenset())
    with pytest.raises(ValueError):
        permute(g, (0, 0, 2))


def test_permute_preserves_invariants():
    rng = np.random.default_rng(11)
    g = random_graph(rng, 9)
    for _ in range(25):
        perm = tuple(int(x) for x in rng.permutation(9))
        h = permute(g, perm)
        assert len(h.edges) == len(g.edges)
        out_degrees = sorted(len(o) for o in g.out_lists)
        assert sorted(len(o) for o in h.out_lists) == out_degrees
        assert sorted(h.node_labels) == sorted(g.node_labels)


# --- text round-trip -----------------------------------------------------------


def test_text_round_trip():
    # the symmetric flag is re-inferred on parse, so compare structure
    rng = np.random.default_rng(13)
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(1, 12)))
        h = from_text(to_text(g))
        assert (h.n, h.node_labels, h.edges) == (g.n, g.node_labels, g.edges)
        closed = all((v, u, l) in g.edges for (u, v, l) in g.edges)
        assert h.symmetric == closed


def test_text_symmetric_flag_reinferred():
    g = Graph(2, (0, 1), frozenset({(0, 1, 0), (1, 0, 0)}), symmetric=True)
    assert from_text(to_text(g)).symmetric


def test_from_text_duplicate_edge():
    with pytest.raises(ParseError, match="line 3.*duplicate"):
        from_text("2 2\n0 1 0\n0 1 0\n0 0\n")


def test_from_text_bad_header():
    with pytest.raises(ParseError, match="line 1"):
        from_text("two 3\n")


def test_from_text_wrong_line_count():
    with pytest.raises(ParseError, match="expected 4 lines"):
        from_text("2 2\n0 1 0\n0 0\n")


def test_from_text_wrong_label_count():
    with pytest.raises(ParseError, match="expected 2 fields"):
        from_text("2 1\n0 1 0\n0\n")


def test_from_text_self_loop_reported_with_line():
    with pytest.raises(ParseError, match="self-loop"):
        from_text("2 1\n1 1 0\n0 0\n")
