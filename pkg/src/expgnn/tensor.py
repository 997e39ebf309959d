"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the active :class:`GradTape`; the tape's
node list is append-only, so it is already topologically ordered and the
backward pass is a single reverse sweep.  Without an active tape every
operation is a plain numpy computation, which keeps evaluation passes
cheap.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Lower bound on the per-row std inside layer_norm.  Rows whose raw std
# falls below this are treated as constant: the clamp wins and the std
# contributes no gradient.
NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_state = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array, optionally tracked for differentiation.

    ``requires_grad`` marks leaf parameters.  Results of operations are
    tracked automatically whenever a tape is active and at least one
    input is tracked.
    """

    __slots__ = ("data", "requires_grad", "tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


@dataclass
class _Node:
    out: Tensor
    # (input tensor, function mapping the output gradient to this
    # input's gradient contribution)
    pulls: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]


class GradTape:
    """Records operations so :func:`backward` can replay them in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None


def record(out_data: np.ndarray,
           pulls: Sequence[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording backward rules for the
    tracked inputs.  Exposed so fused operations (losses, custom heads)
    can be defined outside this module."""
    out = Tensor(out_data)
    tape = _active_tape()
    tracked = [(t, fn) for t, fn in pulls if t.tracked]
    if tape is not None and tracked:
        out.tracked = True
        tape.nodes.append(_Node(out, tracked))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every ``requires_grad`` leaf that
    ``loss`` depends on through ``tape``.  Returns a map keyed by the
    leaf Tensor objects themselves."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, pull in node.pulls:
            contrib = pull(g)
            if contrib.shape != inp.data.shape:
                raise ShapeError(
                    f"backward rule produced shape {contrib.shape} for input "
                    f"of shape {inp.data.shape}")
            if inp.requires_grad:
                if inp in leaves:
                    leaves[inp] = leaves[inp] + contrib
                else:
                    leaves[inp] = contrib
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
    return leaves


# ---------------------------------------------------------------------------
# primitive operations


def _require_2d(name: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} expects a 2-D operand, got shape {t.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return record(out, [(a, lambda g: g @ b.data.T),
                        (b, lambda g: a.data.T @ g)])


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return record(x.data.T.copy(), [(x, lambda g: g.T.copy())])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add mismatch: {a.data.shape} vs {b.data.shape}")
    return record(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, [(x, lambda g: g * c)])


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with a 1-D bias broadcast over rows."""
    _require_2d("affine", x)
    _require_2d("affine", w)
    if b.data.ndim != 1 or b.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"affine bias shape {b.data.shape} does not match "
                         f"weight {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine mismatch: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data + b.data
    return record(out, [(x, lambda g: g @ w.data.T),
                        (w, lambda g: x.data.T @ g),
                        (b, lambda g: g.sum(axis=0))])


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly zero is taken as zero.
    gate = (x.data > 0).astype(np.float64)
    return record(np.maximum(x.data, 0.0), [(x, lambda g: g * gate)])


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to positions where ``mask`` is True.

    Masked positions get weight exactly 0.  A row whose mask is all
    False yields an all-zero row (no spurious uniform attention), and
    contributes no gradient.
    """
    _require_2d("masked_softmax", x)
    if mask.dtype != np.bool_ or mask.shape != x.data.shape:
        raise ShapeError(f"mask must be bool of shape {x.data.shape}, "
                         f"got {mask.dtype} {mask.shape}")
    any_row = mask.any(axis=1, keepdims=True)
    neg_inf = np.where(mask, x.data, -np.inf)
    row_max = np.where(any_row, neg_inf.max(axis=1, keepdims=True), 0.0)
    with np.errstate(invalid="ignore"):
        shifted = np.where(mask, x.data - row_max, -np.inf)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=any_row)

    def pull(g: np.ndarray) -> np.ndarray:
        inner = (g * out).sum(axis=1, keepdims=True)
        return out * (g - inner)

    return record(out, [(x, pull)])


@dataclass
class NormParams:
    """Parameters of one normalized affine stage: projection, gain, bias."""

    proj: Tensor   # (d_in, d_out)
    gain: Tensor   # (d_out,)
    bias: Tensor   # (d_out,)


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """Project then standardize each row and apply gain and bias.

    a = x @ proj; out = gain * (a - mean(a)) / std(a) + bias, with mean
    and population std taken per row over the feature axis.  The std is
    clamped below at NORM_EPS; clamped rows are treated as constant in
    the backward pass (the std term contributes no gradient).
    """
    _require_2d("layer_norm", x)
    _require_2d("layer_norm", p.proj)
    if x.data.shape[1] != p.proj.data.shape[0]:
        raise ShapeError(f"layer_norm mismatch: {x.data.shape} @ {p.proj.data.shape}")
    d_out = p.proj.data.shape[1]
    if p.gain.data.shape != (d_out,) or p.bias.data.shape != (d_out,):
        raise ShapeError("layer_norm gain/bias must be 1-D of projection width")
    if d_out < 2:
        raise ShapeError("layer_norm needs at least 2 output features")

    a = x.data @ p.proj.data
    mu = a.mean(axis=1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=1, keepdims=True)
    raw_std = np.sqrt(var)
    clamped = raw_std < NORM_EPS
    std = np.maximum(raw_std, NORM_EPS)
    xhat = (a - mu) / std
    out = p.gain.data * xhat + p.bias.data

    # both pulls need the same d(loss)/d(a); compute it once per sweep
    cache: dict = {"key": None}

    def _norm_da(g: np.ndarray) -> np.ndarray:
        if cache["key"] is not g:
            dxhat = g * p.gain.data
            centered = dxhat - dxhat.mean(axis=1, keepdims=True)
            curvature = xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            cache["key"] = g
            cache["val"] = (centered - np.where(clamped, 0.0, curvature)) / std
        return cache["val"]

    def pull_x(g: np.ndarray) -> np.ndarray:
        return _norm_da(g) @ p.proj.data.T

    def pull_proj(g: np.ndarray) -> np.ndarray:
        return x.data.T @ _norm_da(g)

    return record(out, [
        (x, pull_x),
        (p.proj, pull_proj),
        (p.gain, lambda g: (g * xhat).sum(axis=0)),
        (p.bias, lambda g: g.sum(axis=0)),
    ])


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the feature axis."""
    if not parts:
        raise ShapeError("concat_last needs at least one operand")
    rows = parts[0].data.shape[0]
    for t in parts:
        _require_2d("concat_last", t)
        if t.data.shape[0] != rows:
            raise ShapeError("concat_last operands disagree on row count")
    widths = [t.data.shape[1] for t in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in parts], axis=1)

    def make_pull(i: int):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi].copy()

    return record(out, [(t, make_pull(i)) for i, t in enumerate(parts)])


def reduce_max_rows(x: Tensor, valid: np.ndarray) -> Tensor:
    """Column-wise max over the rows where ``valid`` is True.

    Returns shape (1, d).  Ties route the gradient to the lowest valid
    row index.  All-False ``valid`` is a contract violation.
    """
    _require_2d("reduce_max_rows", x)
    if valid.dtype != np.bool_ or valid.shape != (x.data.shape[0],):
        raise ShapeError(f"valid must be bool of shape ({x.data.shape[0]},)")
    if not valid.any():
        raise ValueError("reduce_max_rows: no valid rows")
    masked = np.where(valid[:, None], x.data, -np.inf)
    idx = masked.argmax(axis=0)
    cols = np.arange(x.data.shape[1])
    out = x.data[idx, cols].reshape(1, -1)

    def pull(g: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(x.data)
        gx[idx, cols] = g.reshape(-1)
        return gx

    return record(out, [(x, pull)])


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer index (embedding lookup)."""
    _require_2d("gather_rows", table)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows indices must be a 1-D integer array")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows index out of range for table of {n} rows")

    def pull(g: np.ndarray) -> np.ndarray:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt

    return record(table.data[idx], [(table, pull)])


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}")
    orig = x.data.shape
    return record(x.data.reshape(shape).copy(),
                  [(x, lambda g: g.reshape(orig).copy())])


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return record(np.asarray(x.data.sum()),
                  [(x, lambda g: np.full(shape, float(g.reshape(-1)[0])))])
