"""Labeled directed graphs, dense adjacency, and expanding reach windows.

Orientation convention used throughout: in matrices indexed ``[i, j]``,
row ``i`` is the query/target node and column ``j`` the source/key node,
so ``bits[i, j]`` is True when the edge ``j -> i`` exists.  Attention
masks inherit this layout unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class ParseError(ValueError):
    """Malformed graph text; message carries a line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Graph:
    """Directed graph with integer node and edge labels.

    ``edges`` holds (src, dst, label) triples.  ``symmetric`` asserts
    that the edge set is closed under reversal (same label both ways);
    the assertion is validated, undirected-only oracles require it.
    """

    n: int
    node_labels: tuple[int, ...]
    edges: frozenset[tuple[int, int, int]]
    symmetric: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        if len(self.node_labels) != self.n:
            raise ValueError(f"expected {self.n} node labels, "
                             f"got {len(self.node_labels)}")
        if any(l < 0 for l in self.node_labels):
            raise ValueError("node labels must be non-negative")
        for (u, v, l) in self.edges:
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}, {l}) endpoint out of range")
            if u == v:
                raise ValueError(f"self-loop at node {u} is not allowed")
            if l < 0:
                raise ValueError(f"edge label {l} must be non-negative")
        if self.symmetric:
            for (u, v, l) in self.edges:
                if (v, u, l) not in self.edges:
                    raise ValueError(
                        f"symmetric graph lacks reverse of ({u}, {v}, {l})")

    @cached_property
    def out_lists(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node, sorted (dst, label) pairs of outgoing edges."""
        acc: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for (u, v, l) in self.edges:
            acc[u].append((v, l))
        return tuple(tuple(sorted(a)) for a in acc)

    @cached_property
    def in_lists(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node, sorted (src, label) pairs of incoming edges."""
        acc: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for (u, v, l) in self.edges:
            acc[v].append((u, l))
        return tuple(tuple(sorted(a)) for a in acc)

    @cached_property
    def edge_labels(self) -> tuple[int, ...]:
        return tuple(sorted({l for (_, _, l) in self.edges}))


@dataclass(frozen=True)
class AdjMatrix:
    """Dense boolean reachability matrix; bits[i, j] == edge/path j -> i."""

    n: int
    bits: np.ndarray = field(compare=False)

    def __post_init__(self):
        if self.bits.shape != (self.n, self.n) or self.bits.dtype != np.bool_:
            raise ValueError(f"bits must be bool ({self.n}, {self.n})")
        self.bits.setflags(write=False)

    def transposed(self) -> "AdjMatrix":
        return AdjMatrix(self.n, self.bits.T.copy())


def adjacency(g: Graph, edge_label: int | None = None,
              reverse: bool = False) -> AdjMatrix:
    """Adjacency of ``g``, optionally restricted to one edge label and
    optionally with all edges reversed."""
    bits = np.zeros((g.n, g.n), dtype=bool)
    for (u, v, l) in g.edges:
        if edge_label is not None and l != edge_label:
            continue
        if reverse:
            bits[u, v] = True
        else:
            bits[v, u] = True
    return AdjMatrix(g.n, bits)


def expand_window(a: AdjMatrix) -> AdjMatrix:
    """One doubling step of the reach window: paths of length <= 2k from
    paths of length <= k.  Boolean semiring square plus the original."""
    m = a.bits.astype(np.float64)
    two_step = (m @ m) > 0.5
    return AdjMatrix(a.n, two_step | a.bits)


def window_sequence(a: AdjMatrix, layers: int) -> list[AdjMatrix]:
    """Windows for consecutive layers: the k-th entry (0-based) reaches
    along directed paths of length 1 through 2**k."""
    if layers < 1:
        raise ValueError(f"need at least one layer, got {layers}")
    seq = [a]
    for _ in range(layers - 1):
        seq.append(expand_window(seq[-1]))
    return seq


def permute(g: Graph, perm: tuple[int, ...]) -> Graph:
    """Relabel nodes so old node i becomes ``perm[i]``."""
    if sorted(perm) != list(range(g.n)):
        raise ValueError("perm must be a bijection on node indices")
    labels = [0] * g.n
    for i, p in enumerate(perm):
        labels[p] = g.node_labels[i]
    edges = frozenset((perm[u], perm[v], l) for (u, v, l) in g.edges)
    return Graph(g.n, tuple(labels), edges, symmetric=g.symmetric)


# --- text serialization ------------------------------------------------------
#
# Format: header "n m", then m lines "src dst label", then one line of
# n space-separated node labels.


def to_text(g: Graph) -> str:
    lines = [f"{g.n} {len(g.edges)}"]
    for (u, v, l) in sorted(g.edges):
        lines.append(f"{u} {v} {l}")
    lines.append(" ".join(str(l) for l in g.node_labels))
    return "\n".join(lines) + "\n"


def _ints(line: str, line_no: int, expected: int | None = None) -> list[int]:
    parts = line.split()
    if expected is not None and len(parts) != expected:
        raise ParseError(line_no, f"expected {expected} fields, got {len(parts)}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ParseError(line_no, f"non-integer field in {line!r}") from None


def from_text(text: str) -> Graph:
    """Inverse of :func:`to_text`.  The symmetric flag is inferred from
    the parsed edge set."""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError(1, "empty graph record")
    n, m = _ints(lines[0], 1, 2)
    if n < 1 or m < 0:
        raise ParseError(1, f"invalid header n={n} m={m}")
    if len(lines) != m + 2:
        raise ParseError(len(lines), f"expected {m + 2} lines for n={n} m={m}, "
                                     f"got {len(lines)}")
    edges = set()
    for k in range(m):
        u, v, l = _ints(lines[1 + k], 2 + k, 3)
        if (u, v, l) in edges:
            raise ParseError(2 + k, f"duplicate edge ({u}, {v}, {l})")
        edges.add((u, v, l))
    labels = _ints(lines[m + 1], m + 2, n)
    fs = frozenset(edges)
    sym = all((v, u, l) in fs for (u, v, l) in fs)
    try:
        return Graph(n, tuple(labels), fs, symmetric=sym)
    except ValueError as e:
        raise ParseError(m + 2, str(e)) from None
