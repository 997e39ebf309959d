"""Finite-difference verification of every backward rule.

Each named check builds a small scalar loss from random inputs, computes
gradients with the tape, then re-derives them by central differences and
reports the worst elementwise relative error.  Probes are drawn away
from ReLU kinks and max ties so the comparison is well posed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
# Blanket tolerance; smooth linear-ish ops get the tighter bound.
TOL_DEFAULT = 1e-4
TOL_TIGHT = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def fd_check(make_loss: Callable[[], T.Tensor],
             leaves: dict[str, T.Tensor],
             h: float = FD_STEP) -> float:
    """Compare taped gradients of ``make_loss()`` against central
    differences for every leaf.  ``make_loss`` must be deterministic and
    must read the leaves' current ``data`` each call."""
    with T.GradTape() as tape:
        out = make_loss()
        grads = T.backward(out, tape)
    worst = 0.0
    for name, leaf in leaves.items():
        analytic = grads.get(leaf)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(make_loss().data.reshape(-1)[0])
            flat[i] = orig - h
            down = float(make_loss().data.reshape(-1)[0])
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = relative_error(analytic.reshape(-1), numeric)
        worst = max(worst, err)
    return worst


def _away_from_zero(x: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    """Push entries of x outside (-gap, gap) so ReLU stays locally linear."""
    return np.where(np.abs(x) < gap, x + np.sign(x + 0.5) * gap, x)


def _weighted(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Scalar probe loss sum(out * weights); weights fixed per check."""
    w = T.Tensor(weights)
    flat_out = T.reshape(out, (1, out.data.size))
    flat_w = T.reshape(w, (out.data.size, 1))
    return T.matmul(flat_out, flat_w)


# --- individual checks ------------------------------------------------------


def check_matmul(rng: np.random.Generator) -> float:
    a = T.Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = T.Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    w = rng.uniform(-1, 1, (3, 2))
    return fd_check(lambda: _weighted(T.matmul(a, b), w), {"a": a, "b": b})


def check_transpose(rng: np.random.Generator) -> float:
    x = T.Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
    w = rng.uniform(-1, 1, (5, 3))
    return fd_check(lambda: _weighted(T.transpose(x), w), {"x": x})


def check_add_scale(rng: np.random.Generator) -> float:
    a = T.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    b = T.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    w = rng.uniform(-1, 1, (4, 3))
    return fd_check(lambda: _weighted(T.scale(T.add(a, b), -1.7), w),
                    {"a": a, "b": b})


def check_affine(rng: np.random.Generator) -> float:
    x = T.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    w = T.Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
    b = T.Tensor(rng.uniform(-2, 2, (5,)), requires_grad=True)
    probe = rng.uniform(-1, 1, (4, 5))
    return fd_check(lambda: _weighted(T.affine(x, w, b), probe),
                    {"x": x, "w": w, "b": b})


def check_relu(rng: np.random.Generator) -> float:
    x = T.Tensor(_away_from_zero(rng.uniform(-2, 2, (4, 6))), requires_grad=True)
    w = rng.uniform(-1, 1, (4, 6))
    return fd_check(lambda: _weighted(T.relu(x), w), {"x": x})


def check_masked_softmax(rng: np.random.Generator) -> float:
    x = T.Tensor(rng.uniform(-2, 2, (5, 5)), requires_grad=True)
    mask = rng.random((5, 5)) < 0.6
    mask[0, :] = False          # exercise the all-masked row
    mask[1, :] = True
    w = rng.uniform(-1, 1, (5, 5))
    return fd_check(lambda: _weighted(T.masked_softmax(x, mask), w), {"x": x})


def check_layer_norm(rng: np.random.Generator) -> float:
    x = T.Tensor(rng.uniform(-2, 2, (4, 6)), requires_grad=True)
    p = T.NormParams(
        proj=T.Tensor(rng.uniform(-1, 1, (6, 5)), requires_grad=True),
        gain=T.Tensor(rng.uniform(0.5, 1.5, (5,)), requires_grad=True),
        bias=T.Tensor(rng.uniform(-0.5, 0.5, (5,)), requires_grad=True),
    )
    w = rng.uniform(-1, 1, (4, 5))
    return fd_check(lambda: _weighted(T.layer_norm(x, p), w),
                    {"x": x, "proj": p.proj, "gain": p.gain, "bias": p.bias})


def check_concat(rng: np.random.Generator) -> float:
    a = T.Tensor(rng.uniform(-2, 2, (3, 2)), requires_grad=True)
    b = T.Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    c = T.Tensor(rng.uniform(-2, 2, (3, 1)), requires_grad=True)
    w = rng.uniform(-1, 1, (3, 7))
    return fd_check(lambda: _weighted(T.concat_last([a, b, c]), w),
                    {"a": a, "b": b, "c": c})


def check_reduce_max(rng: np.random.Generator) -> float:
    # Regenerate until every column's top-two gap clears the FD step.
    while True:
        data = rng.uniform(-2, 2, (6, 4))
        top2 = np.sort(data, axis=0)[-2:, :]
        if (top2[1] - top2[0]).min() > 1e-3:
            break
    x = T.Tensor(data, requires_grad=True)
    valid = np.ones(6, dtype=bool)
    valid[rng.integers(0, 6)] = False
    w = rng.uniform(-1, 1, (1, 4))
    return fd_check(lambda: _weighted(T.reduce_max_rows(x, valid), w), {"x": x})


def check_gather(rng: np.random.Generator) -> float:
    table = T.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    idx = rng.integers(0, 4, size=6)     # repeats exercise accumulation
    w = rng.uniform(-1, 1, (6, 3))
    return fd_check(lambda: _weighted(T.gather_rows(table, idx), w),
                    {"table": table})


def check_reshape_sum(rng: np.random.Generator) -> float:
    x = T.Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    return fd_check(lambda: T.sum_all(T.reshape(x, (2, 6))), {"x": x})


def check_cross_entropy(rng: np.random.Generator) -> float:
    from .training import cross_entropy
    logits = T.Tensor(rng.uniform(-2, 2, (1, 5)), requires_grad=True)
    target = int(rng.integers(0, 5))
    return fd_check(lambda: cross_entropy(logits, target), {"logits": logits})


def check_end_to_end(rng: np.random.Generator) -> float:
    """Full loss on a 5-node graph against every model parameter."""
    from .graphs import Graph
    from .model import ModelConfig, ModelParams, build_head_masks, forward
    from .training import cross_entropy

    g = Graph(n=5,
              node_labels=(0, 1, 0, 1, 0),
              edges=frozenset({(0, 1, 0), (1, 2, 0), (2, 3, 1),
                               (3, 4, 1), (4, 0, 0), (1, 3, 0)}))
    cfg = ModelConfig(n_node_labels=2, n_edge_labels=2, n_classes=2,
                      n_layers=2, d_model=8, d_qk=3, d_v=3,
                      heads_per_type=1, random_id_width=4)
    params = ModelParams.init(cfg, rng)
    masks = build_head_masks(g, cfg)
    ids = (rng.integers(0, 2, (5, 4))).astype(np.float64)

    def make_loss() -> T.Tensor:
        logits = forward(g, params, masks=masks, identifiers=ids)
        return cross_entropy(logits, 1)

    return fd_check(make_loss, dict(params.tensors))


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


SUITE: dict[str, tuple[float, Callable[[np.random.Generator], float]]] = {
    "matmul": (TOL_TIGHT, check_matmul),
    "transpose": (TOL_TIGHT, check_transpose),
    "add_scale": (TOL_TIGHT, check_add_scale),
    "affine": (TOL_TIGHT, check_affine),
    "relu": (TOL_TIGHT, check_relu),
    "masked_softmax": (TOL_DEFAULT, check_masked_softmax),
    "layer_norm": (TOL_DEFAULT, check_layer_norm),
    "concat_last": (TOL_TIGHT, check_concat),
    "reduce_max_rows": (TOL_TIGHT, check_reduce_max),
    "gather_rows": (TOL_TIGHT, check_gather),
    "reshape_sum": (TOL_TIGHT, check_reshape_sum),
    "cross_entropy": (TOL_DEFAULT, check_cross_entropy),
    "end_to_end": (TOL_DEFAULT, check_end_to_end),
}


def run_suite(names: list[str] | None = None,
              probes: int = 5,
              seed: int = 0) -> list[CheckResult]:
    """Run the selected checks ``probes`` times each with derived seeds
    and keep the worst error per check.  Unknown names raise KeyError."""
    selected = list(SUITE) if names is None else names
    for name in selected:
        if name not in SUITE:
            raise KeyError(f"unknown gradient check: {name!r}")
    results = []
    for name in selected:
        tol, fn = SUITE[name]
        worst = 0.0
        for p in range(probes):
            rng = np.random.default_rng((seed, zlib.crc32(name.encode()), p))
            worst = max(worst, fn(rng))
        results.append(CheckResult(name, worst, tol))
    return results
