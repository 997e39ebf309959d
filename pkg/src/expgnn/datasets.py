"""Synthetic graph dataset families, calibration, snapshots, and a parser
for the public chemical-benchmark text format.

Every generator takes an explicit numpy Generator and is deterministic
given the seed.  Training data is streamed rather than materialized;
snapshot files exist for reproducibility and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import oracles
from .graphs import Graph, ParseError, from_text, permute, to_text

FAMILIES = ("uniform", "tree", "tree_plus_edge", "line", "cycle",
            "two_paths", "csl", "tud")

# Skip lengths of the standard 41-node circulant benchmark family.
CSL_SKIPS_41 = (2, 3, 4, 5, 6, 9, 11, 12, 13, 16)


class CalibrationError(RuntimeError):
    """Edge-probability search could not bracket a 50% positive rate."""


@dataclass(frozen=True)
class LabeledGraph:
    graph: Graph
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for one graph distribution.

    ``n_nodes`` is a fixed count or an inclusive (lo, hi) range drawn per
    graph.  ``count`` bounds :func:`stream` (None = unbounded) and sizes
    :func:`materialize`.  ``labeler`` picks the property oracle for the
    uniform family ("path" also switches generation to directed graphs
    with two marked nodes; the other labelers use symmetric graphs).
    ``path`` points at a corpus directory for the tud family.
    """

    family: str
    n_nodes: int | tuple[int, int]
    count: int | None
    seed: int
    edge_prob: float | None = None
    labeler: str | None = None
    path: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if (self.edge_prob is not None) != (self.family == "uniform"):
            raise ValueError("edge_prob is required for the uniform family "
                             "and forbidden elsewhere")
        if self.edge_prob is not None and not (0.0 < self.edge_prob < 1.0):
            raise ValueError(f"edge_prob must be in (0, 1), got {self.edge_prob}")
        if self.family == "uniform" and self.labeler is None:
            raise ValueError("uniform family needs a labeler")
        if self.family == "tud" and self.path is None:
            raise ValueError("tud family needs a corpus path")
        if self.count is not None and self.count < 0:
            raise ValueError(f"count must be non-negative, got {self.count}")


# --- labeler registry --------------------------------------------------------


def _path_class(g: Graph) -> bool:
    a = g.node_labels.index(1)
    b = g.node_labels.index(2)
    return oracles.path_exists(g, a, b)


LABELERS: dict[str, Callable[[Graph], bool]] = {
    "cycle": oracles.has_cycle,
    "clique4": oracles.has_clique4,
    "degree7": lambda g: oracles.max_degree_at_least(g, 7),
    "path": _path_class,
}


# --- generators --------------------------------------------------------------


def gen_uniform(n: int, p: float, symmetric: bool,
                rng: np.random.Generator) -> Graph:
    """Every node pair receives an edge independently with probability p
    (unordered pairs when symmetric, ordered pairs otherwise)."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"p must be in (0, 1), got {p}")
    draws = rng.random((n, n))
    edges: set[tuple[int, int, int]] = set()
    if symmetric:
        iu, ju = np.triu_indices(n, k=1)
        sel = draws[iu, ju] < p
        for i, j in zip(iu[sel], ju[sel]):
            edges.add((int(i), int(j), 0))
            edges.add((int(j), int(i), 0))
    else:
        hit = draws < p
        np.fill_diagonal(hit, False)
        for i, j in np.argwhere(hit):
            edges.add((int(i), int(j), 0))
    return Graph(n, (0,) * n, frozenset(edges), symmetric=symmetric)


def gen_tree(n: int, extra_edge: bool, rng: np.random.Generator) -> LabeledGraph:
    """Random tree grown by attaching each new node to a uniformly chosen
    existing one; optionally one extra edge between a uniformly chosen
    non-adjacent pair, which closes exactly one cycle."""
    if n < 2:
        raise ValueError(f"trees need at least 2 nodes, got {n}")
    if extra_edge and n < 3:
        raise ValueError("extra edge needs n >= 3 (a non-adjacent pair)")
    pairs = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    if extra_edge:
        present = {(min(u, v), max(u, v)) for (u, v) in pairs}
        candidates = [(i, j) for i in range(n) for j in range(i + 1, n)
                      if (i, j) not in present]
        pairs.append(candidates[int(rng.integers(0, len(candidates)))])
    edges = frozenset((u, v, 0) for (u, v) in pairs) \
        | frozenset((v, u, 0) for (u, v) in pairs)
    g = Graph(n, (0,) * n, edges, symmetric=True)
    return LabeledGraph(g, int(extra_edge))


def gen_line_or_cycle(length: int, cycle: bool) -> LabeledGraph:
    """Symmetric path or cycle of the given node count; class = cycle."""
    if not (3 <= length <= 64):
        raise ValueError(f"length must be in [3, 64], got {length}")
    pairs = [(i, i + 1) for i in range(length - 1)]
    if cycle:
        pairs.append((length - 1, 0))
    edges = frozenset((u, v, 0) for (u, v) in pairs) \
        | frozenset((v, u, 0) for (u, v) in pairs)
    g = Graph(length, (0,) * length, edges, symmetric=True)
    return LabeledGraph(g, int(cycle))


def gen_two_paths(length: int, connected: bool,
                  rng: np.random.Generator | None = None) -> LabeledGraph:
    """Two directed paths of ``length`` nodes each; the head of one path
    is marked 1 and a tail is marked 2 on the same path (connected) or
    the other path (not connected).  Class = directed reachability 1->2.
    The rng only randomizes which block holds the marked head."""
    if not (2 <= length <= 32):
        raise ValueError(f"path length must be in [2, 32], got {length}")
    unconnected, joined = oracles.two_paths_pair(length)
    g = joined if connected else unconnected
    if rng is not None and int(rng.integers(0, 2)) == 1:
        swap = tuple((i + length) % (2 * length) for i in range(2 * length))
        g = permute(g, swap)
    return LabeledGraph(g, int(connected))


def gen_csl(n: int, r: int) -> Graph:
    """Circulant graph: i and j adjacent iff their circular distance is
    1 or r."""
    if not (2 <= r <= n - 2):
        raise ValueError(f"skip must be in [2, n-2], got r={r} for n={n}")
    edges: set[tuple[int, int, int]] = set()
    for i in range(n):
        for d in (1, r):
            j = (i + d) % n
            edges.add((i, j, 0))
            edges.add((j, i, 0))
    return Graph(n, (0,) * n, frozenset(edges), symmetric=True)


def csl_family(n: int = 41,
               skips: Sequence[int] | None = None) -> list[LabeledGraph]:
    """The circulant classification family: one graph per skip length,
    class = skip index.  Defaults to the standard ten skips at n = 41;
    for other sizes every distinct skip 2..(n-1)//2 is used (skip r and
    n-r describe the same graph)."""
    if skips is None:
        skips = CSL_SKIPS_41 if n == 41 else tuple(range(2, (n - 1) // 2 + 1))
    if not skips:
        raise ValueError(f"no valid circulant skips for n={n}")
    return [LabeledGraph(gen_csl(n, r), idx) for idx, r in enumerate(skips)]


def gen_path_dataset_graph(n: int, p: float,
                           rng: np.random.Generator) -> LabeledGraph:
    """Directed uniform graph with two distinct uniformly drawn nodes
    marked 1 and 2; class = directed reachability from 1 to 2."""
    if n < 2:
        raise ValueError(f"need n >= 2 for two marked nodes, got {n}")
    base = gen_uniform(n, p, symmetric=False, rng=rng)
    order = rng.permutation(n)
    a, b = int(order[0]), int(order[1])
    labels = [0] * n
    labels[a] = 1
    labels[b] = 2
    g = Graph(n, tuple(labels), base.edges, symmetric=False)
    return LabeledGraph(g, int(oracles.path_exists(g, a, b)))


# --- calibration -------------------------------------------------------------

CALIBRATION_PROBES = 2000
CALIBRATION_ITERS = 20
_P_LO, _P_HI = 1e-4, 0.95


def _positive_rate(p: float, n: int, labeler: str | Callable[[Graph], bool],
                   symmetric: bool, rng: np.random.Generator,
                   probes: int) -> float:
    fn = LABELERS[labeler] if isinstance(labeler, str) else labeler
    hits = 0
    for _ in range(probes):
        if labeler == "path":
            hits += gen_path_dataset_graph(n, p, rng).class_id
        else:
            hits += bool(fn(gen_uniform(n, p, symmetric, rng)))
    return hits / probes


def calibrate_p(n: int, labeler: str | Callable[[Graph], bool],
                symmetric: bool, seed: int = 0,
                probes: int = CALIBRATION_PROBES,
                iters: int = CALIBRATION_ITERS) -> float:
    """Bisect the edge probability until about half the generated graphs
    are positive under the labeler.  Raises CalibrationError when the
    positive rate does not straddle 50% on the search bracket or the
    final estimate misses [0.45, 0.55]."""
    def rate(p: float, tag: int) -> float:
        return _positive_rate(p, n, labeler, symmetric,
                              np.random.default_rng((seed, tag)), probes)

    lo, hi = _P_LO, _P_HI
    f_lo, f_hi = rate(lo, 0), rate(hi, 1)
    if not (f_lo < 0.45 and f_hi > 0.55):
        raise CalibrationError(
            f"positive rate not monotone-bracketed: f({lo})={f_lo:.3f}, "
            f"f({hi})={f_hi:.3f}")
    for it in range(iters):
        mid = 0.5 * (lo + hi)
        if rate(mid, 2 + it) < 0.5:
            lo = mid
        else:
            hi = mid
    p_star = 0.5 * (lo + hi)
    final = rate(p_star, 2 + iters)
    if not (0.45 <= final <= 0.55):
        raise CalibrationError(
            f"calibration landed at p={p_star:.5f} with rate {final:.3f} "
            f"outside [0.45, 0.55]")
    return p_star


# --- streaming ---------------------------------------------------------------


def _draw_n(n_nodes: int | tuple[int, int], rng: np.random.Generator) -> int:
    if isinstance(n_nodes, tuple):
        lo, hi = n_nodes
        return int(rng.integers(lo, hi + 1))
    return int(n_nodes)


def stream(spec: DatasetSpec, shard: int = 0) -> Iterator[LabeledGraph]:
    """Deterministic graph stream for ``spec``; yields ``count`` graphs
    (unbounded when count is None).  Shards use seed XOR shard so
    parallel consumers draw disjoint deterministic sequences."""
    rng = np.random.default_rng(spec.seed ^ shard)
    if spec.family == "csl":
        base = csl_family(_draw_n(spec.n_nodes, rng))
    elif spec.family == "tud":
        base = load_tud_corpus(spec.path)
    else:
        base = None
    produced = 0
    while spec.count is None or produced < spec.count:
        if base is not None:
            yield base[produced % len(base)]
        else:
            yield _generate_one(spec, rng)
        produced += 1


def _generate_one(spec: DatasetSpec, rng: np.random.Generator) -> LabeledGraph:
    n = _draw_n(spec.n_nodes, rng)
    fam = spec.family
    if fam == "uniform":
        if spec.labeler == "path":
            return gen_path_dataset_graph(n, spec.edge_prob, rng)
        g = gen_uniform(n, spec.edge_prob, symmetric=True, rng=rng)
        return LabeledGraph(g, int(bool(LABELERS[spec.labeler](g))))
    if fam == "tree":
        return gen_tree(n, extra_edge=False, rng=rng)
    if fam == "tree_plus_edge":
        return gen_tree(n, extra_edge=True, rng=rng)
    if fam == "line":
        return gen_line_or_cycle(n, cycle=False)
    if fam == "cycle":
        return gen_line_or_cycle(n, cycle=True)
    if fam == "two_paths":
        return gen_two_paths(n, connected=bool(rng.integers(0, 2)), rng=rng)
    raise AssertionError(f"unhandled family {fam}")


def materialize(spec: DatasetSpec) -> list[LabeledGraph]:
    if spec.count is None:
        raise ValueError("materialize needs a bounded count")
    return list(stream(spec))


# --- snapshots ---------------------------------------------------------------
#
# One record per graph: the graph text format followed by a "class <id>"
# line; records separated by a blank line.


def save_snapshot(path: str | Path, graphs: Sequence[LabeledGraph]) -> None:
    records = [to_text(lg.graph) + f"class {lg.class_id}\n" for lg in graphs]
    Path(path).write_text("\n".join(records), encoding="utf-8")


def load_snapshot(path: str | Path) -> list[LabeledGraph]:
    text = Path(path).read_text(encoding="utf-8")
    out: list[LabeledGraph] = []
    for chunk in text.split("\n\n"):
        if not chunk.strip():
            continue
        lines = chunk.rstrip("\n").splitlines()
        if not lines[-1].startswith("class "):
            raise ParseError(len(lines), "record must end with a class line")
        try:
            class_id = int(lines[-1][len("class "):])
        except ValueError:
            raise ParseError(len(lines), f"bad class line {lines[-1]!r}") from None
        out.append(LabeledGraph(from_text("\n".join(lines[:-1])), class_id))
    return out


# --- public chemical-benchmark text format -----------------------------------
#
# A corpus directory holds PREFIX_A.txt (comma-separated 1-based node
# pairs, one edge per line), PREFIX_graph_indicator.txt (line k = graph
# id of node k), PREFIX_graph_labels.txt, and optionally
# PREFIX_node_labels.txt / PREFIX_edge_labels.txt.  Everything is
# 1-based on disk and 0-based in memory.


def _read_int_lines(path: Path) -> list[int]:
    out = []
    for no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = raw.strip()
        if not s:
            continue
        try:
            out.append(int(s))
        except ValueError:
            raise ParseError(no, f"{path.name}: expected integer, got {s!r}") from None
    return out


def load_tud_corpus(path: str | Path) -> list[LabeledGraph]:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {d}")
    a_files = sorted(d.glob("*_A.txt"))
    if len(a_files) != 1:
        raise FileNotFoundError(
            f"expected exactly one *_A.txt in {d}, found {len(a_files)}")
    prefix = a_files[0].name[: -len("_A.txt")]

    def required(suffix: str) -> Path:
        p = d / f"{prefix}_{suffix}.txt"
        if not p.is_file():
            raise FileNotFoundError(f"missing mandatory file: {p}")
        return p

    def optional(suffix: str) -> Path | None:
        p = d / f"{prefix}_{suffix}.txt"
        return p if p.is_file() else None

    indicator = _read_int_lines(required("graph_indicator"))
    graph_labels_raw = _read_int_lines(required("graph_labels"))
    n_graphs = len(graph_labels_raw)
    if n_graphs == 0:
        raise ParseError(1, f"{prefix}_graph_labels.txt: no graphs")

    node_of: list[list[int]] = [[] for _ in range(n_graphs)]
    local_id: list[int] = []
    graph_of: list[int] = []
    for node_no, gid in enumerate(indicator, 1):
        if not (1 <= gid <= n_graphs):
            raise ParseError(node_no, f"{prefix}_graph_indicator.txt: graph id "
                                      f"{gid} outside 1..{n_graphs}")
        graph_of.append(gid - 1)
        local_id.append(len(node_of[gid - 1]))
        node_of[gid - 1].append(node_no - 1)
    n_nodes = len(indicator)
    for gidx, nodes in enumerate(node_of):
        if not nodes:
            raise ParseError(gidx + 1, f"{prefix}_graph_indicator.txt: graph "
                                       f"{gidx + 1} has no nodes")

    node_labels = [0] * n_nodes
    nl_path = optional("node_labels")
    if nl_path is not None:
        labels = _read_int_lines(nl_path)
        if len(labels) != n_nodes:
            raise ParseError(len(labels), f"{nl_path.name}: {len(labels)} labels "
                                          f"for {n_nodes} nodes")
        node_labels = labels

    edge_lines: list[tuple[int, int, int]] = []   # (line_no, u, v) 1-based
    for no, raw in enumerate(a_files[0].read_text(encoding="utf-8").splitlines(), 1):
        s = raw.strip()
        if not s:
            continue
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != 2:
            raise ParseError(no, f"{a_files[0].name}: expected 'u, v', got {s!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(no, f"{a_files[0].name}: non-integer endpoint "
                                 f"in {s!r}") from None
        if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
            raise ParseError(no, f"{a_files[0].name}: endpoint outside "
                                 f"1..{n_nodes} in {s!r}")
        if u == v:
            raise ParseError(no, f"{a_files[0].name}: self-loop at node {u}")
        if graph_of[u - 1] != graph_of[v - 1]:
            raise ParseError(no, f"{a_files[0].name}: edge ({u}, {v}) joins "
                                 f"nodes of different graphs")
        edge_lines.append((no, u, v))

    edge_labels = [0] * len(edge_lines)
    el_path = optional("edge_labels")
    if el_path is not None:
        labels = _read_int_lines(el_path)
        if len(labels) != len(edge_lines):
            raise ParseError(len(labels), f"{el_path.name}: {len(labels)} labels "
                                          f"for {len(edge_lines)} edges")
        edge_labels = labels

    class_map = {c: i for i, c in enumerate(sorted(set(graph_labels_raw)))}
    per_graph_edges: list[set[tuple[int, int, int]]] = [set() for _ in range(n_graphs)]
    for (no, u, v), lab in zip(edge_lines, edge_labels):
        gidx = graph_of[u - 1]
        if lab < 0:
            raise ParseError(no, f"{prefix}_edge_labels.txt: negative label {lab}")
        per_graph_edges[gidx].add((local_id[u - 1], local_id[v - 1], lab))

    out = []
    for gidx in range(n_graphs):
        labels = tuple(node_labels[g] for g in node_of[gidx])
        fs = frozenset(per_graph_edges[gidx])
        sym = all((v, u, l) in fs for (u, v, l) in fs)
        g = Graph(len(node_of[gidx]), labels, fs, symmetric=sym)
        out.append(LabeledGraph(g, class_map[graph_labels_raw[gidx]]))
    return out
