"""Brute-force graph property oracles and 1-WL color refinement.

The oracles are deliberately simple (union-find, BFS, exhaustive
enumeration) so they can serve as independent ground truth for the
learned models and the window arithmetic.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass

from .graphs import Graph


def _require_symmetric(g: Graph, op: str) -> None:
    if not g.symmetric:
        raise ValueError(f"{op} is defined on symmetric graphs only")


def _undirected_pairs(g: Graph) -> set[tuple[int, int]]:
    return {(min(u, v), max(u, v)) for (u, v, _) in g.edges}


def has_cycle(g: Graph) -> bool:
    """True when the undirected simple graph contains a cycle.

    Union-find over deduplicated undirected pairs; parallel labels on
    the same pair do not count as a cycle.
    """
    _require_symmetric(g, "has_cycle")
    parent = list(range(g.n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (u, v) in sorted(_undirected_pairs(g)):
        ru, rv = find(u), find(v)
        if ru == rv:
            return True
        parent[ru] = rv
    return False


def has_clique4(g: Graph) -> bool:
    """True when four pairwise-adjacent nodes exist (undirected view)."""
    masks = [0] * g.n
    for (u, v, _) in g.edges:
        masks[u] |= 1 << v
        masks[v] |= 1 << u
    for i in range(g.n):
        above_i = masks[i] >> (i + 1) << (i + 1)
        j_bits = above_i
        while j_bits:
            j = (j_bits & -j_bits).bit_length() - 1
            j_bits &= j_bits - 1
            common = above_i & masks[j] >> (j + 1) << (j + 1)
            k_bits = common
            while k_bits:
                k = (k_bits & -k_bits).bit_length() - 1
                k_bits &= k_bits - 1
                if common & masks[k] >> (k + 1) << (k + 1):
                    return True
    return False


def path_exists(g: Graph, a: int, b: int) -> bool:
    """Directed reachability from a to b; every node reaches itself."""
    if not (0 <= a < g.n and 0 <= b < g.n):
        raise ValueError(f"endpoints ({a}, {b}) out of range for n={g.n}")
    if a == b:
        return True
    seen = {a}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        for (v, _) in g.out_lists[u]:
            if v == b:
                return True
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return False


def max_degree_at_least(g: Graph, k: int) -> bool:
    """True when some node has at least k distinct undirected neighbors."""
    if k <= 0:
        return True
    neigh: list[set[int]] = [set() for _ in range(g.n)]
    for (u, v, _) in g.edges:
        neigh[u].add(v)
        neigh[v].add(u)
    return any(len(s) >= k for s in neigh)


# --- 1-WL color refinement ---------------------------------------------------


@dataclass(frozen=True)
class WlColoring:
    """Stable coloring: refinement rounds run, per-node canonical color
    ids, and the color histogram."""

    rounds: int
    colors: tuple[int, ...]
    histogram: dict[int, int]

    @property
    def classes(self) -> int:
        return len(self.histogram)


def _dense_ids(signatures: list) -> tuple[int, ...]:
    """Map signatures to 0..k-1 in sorted-signature order (deterministic)."""
    table = {sig: i for i, sig in enumerate(sorted(set(signatures)))}
    return tuple(table[sig] for sig in signatures)


def wl_refine(g: Graph, max_rounds: int | None = None) -> WlColoring:
    """Iterate color refinement to a stable partition.

    A node's round signature is its own color plus the multisets of
    (color, edge label) pairs over in-neighbors and over out-neighbors.
    Colors start from the node labels.  Each round only ever splits
    classes, so the partition is stable exactly when the class count
    stops growing; the confirming round is included in ``rounds``.
    ``max_rounds`` caps the iteration for studying pre-convergence
    colorings; the default runs to stability.
    """
    colors = _dense_ids([(l,) for l in g.node_labels])
    rounds = 0
    while max_rounds is None or rounds < max_rounds:
        sigs = [
            (colors[i],
             tuple(sorted((colors[j], l) for (j, l) in g.in_lists[i])),
             tuple(sorted((colors[j], l) for (j, l) in g.out_lists[i])))
            for i in range(g.n)
        ]
        new = _dense_ids(sigs)
        rounds += 1
        stable = len(set(new)) == len(set(colors))
        colors = new
        if stable:
            break
    return WlColoring(rounds, colors, dict(Counter(colors)))


def disjoint_union(g1: Graph, g2: Graph) -> Graph:
    labels = g1.node_labels + g2.node_labels
    edges = set(g1.edges)
    for (u, v, l) in g2.edges:
        edges.add((u + g1.n, v + g1.n, l))
    return Graph(g1.n + g2.n, labels, frozenset(edges),
                 symmetric=g1.symmetric and g2.symmetric)


def wl_distinguishable(g1: Graph, g2: Graph) -> bool:
    """Whether stable refinement of the disjoint union separates the two
    graphs, i.e. their stable color histograms differ.  False means the
    pair is beyond 1-WL (or isomorphic)."""
    union = disjoint_union(g1, g2)
    coloring = wl_refine(union)
    h1 = Counter(coloring.colors[:g1.n])
    h2 = Counter(coloring.colors[g1.n:])
    return h1 != h2


# --- fixture pairs -----------------------------------------------------------


def diamond_pair() -> tuple[Graph, Graph]:
    """Two non-isomorphic 8-node digraphs built from diamond motifs that
    stable refinement cannot separate."""
    d1 = frozenset({(0, 1, 0), (0, 7, 0), (1, 2, 0), (3, 5, 0),
                    (3, 6, 0), (5, 4, 0), (6, 4, 0), (7, 2, 0)})
    d2 = frozenset({(0, 7, 0), (1, 6, 0), (2, 6, 0), (3, 7, 0),
                    (4, 2, 0), (4, 3, 0), (5, 0, 0), (5, 1, 0)})
    labels = (0,) * 8
    return Graph(8, labels, d1), Graph(8, labels, d2)


def two_paths_pair(length: int = 5) -> tuple[Graph, Graph]:
    """Two 2x-path digraphs with one head marked 1 and one tail marked 2.

    In the first graph the marks sit on different paths (no directed
    path from 1 to 2); in the second they sit on the same path.  Node
    degrees and immediate label neighborhoods match across the pair.
    """
    if length < 2:
        raise ValueError("paths need at least 2 nodes")
    n = 2 * length

    def build(a_path: int, b_path: int) -> Graph:
        edges = set()
        for p in range(2):
            base = p * length
            for i in range(length - 1):
                edges.add((base + i, base + i + 1, 0))
        labels = [0] * n
        labels[a_path * length] = 1                   # head mark
        labels[b_path * length + length - 1] = 2      # tail mark
        return Graph(n, tuple(labels), frozenset(edges))

    return build(0, 1), build(0, 0)
