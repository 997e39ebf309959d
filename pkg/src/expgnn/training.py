"""Adam optimizer, cross-entropy loss, streamed training loop, and the
resampled evaluation protocol."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .datasets import DatasetSpec, LabeledGraph, materialize, stream
from .model import HeadMaskSet, ModelConfig, ModelParams, build_head_masks, forward
from .tensor import GradTape, Tensor, backward

# Optimizer defaults: lr 1e-3, betas 0.9/0.999, eps 1e-7 added outside
# the square root.
ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7

# Training specs whose corpus fits below this bound are materialized
# once and cycled (mask reuse); larger bounded corpora are re-streamed
# from the seeded generator instead of being held in memory.
_CYCLE_LIMIT = 4096


class DivergenceError(RuntimeError):
    """Non-finite loss encountered during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_adam(params: ModelParams, lr: float = ADAM_LR,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> AdamState:
    zeros = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
    return AdamState(m=zeros,
                     v={name: arr.copy() for name, arr in zeros.items()},
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, grads: dict[str, np.ndarray],
              params: ModelParams) -> None:
    """Bias-corrected Adam update in place on the parameter arrays."""
    if set(grads) != set(params.tensors):
        missing = set(params.tensors) ^ set(grads)
        shown = sorted(repr(k) for k in missing)[:4]
        raise ValueError(f"gradient map does not cover the parameter set; "
                         f"mismatch on {shown}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, t in params.tensors.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} {t.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] with log-sum-exp stabilization."""
    z = logits.data.reshape(-1)
    if not (0 <= target < z.size):
        raise ValueError(f"target {target} out of range for {z.size} classes")
    m = z.max()
    exps = np.exp(z - m)
    total = exps.sum()
    loss = np.asarray(m + np.log(total) - z[target])
    softmax = exps / total

    def pull(g: np.ndarray) -> np.ndarray:
        grad = softmax.copy()
        grad[target] -= 1.0
        return (float(g.reshape(-1)[0]) * grad).reshape(logits.data.shape)

    return T.record(loss, [(logits, pull)])


@dataclass
class LogRow:
    step: int
    loss: float
    acc: float


@dataclass
class EvalStats:
    mean: float
    std: float
    min: float
    max: float
    accs: tuple[float, ...]


@dataclass
class TrainReport:
    """Line-oriented training log plus the final per-evaluation-set
    accuracy table (name, mean, std, min, max)."""

    log: list[LogRow] = field(default_factory=list)
    evals: list[tuple[str, EvalStats]] = field(default_factory=list)

    def add_eval(self, name: str, stats: EvalStats) -> None:
        self.evals.append((name, stats))

    def log_lines(self) -> list[str]:
        return [f"step={r.step} loss={r.loss:.6f} acc={r.acc:.4f}"
                for r in self.log]

    def table_rows(self) -> list[str]:
        """Machine-readable tab-delimited rows, header first."""
        rows = ["name\tmean\tstd\tmin\tmax"]
        for name, s in self.evals:
            rows.append(f"{name}\t{s.mean:.4f}\t{s.std:.4f}"
                        f"\t{s.min:.4f}\t{s.max:.4f}")
        return rows

    def render(self) -> str:
        out = list(self.log_lines())
        if self.evals:
            width = max(len(name) for name, _ in self.evals)
            out.append(f"{'set':<{width}}  mean    std     min     max")
            for name, s in self.evals:
                out.append(f"{name:<{width}}  {s.mean:.4f}  {s.std:.4f}  "
                           f"{s.min:.4f}  {s.max:.4f}")
        return "\n".join(out)


def _batched(it: Iterable[LabeledGraph], size: int) -> Iterable[list[LabeledGraph]]:
    batch = []
    for item in it:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []


def _graph_pass(lg: LabeledGraph, params: ModelParams, masks: HeadMaskSet,
                rng: np.random.Generator) -> tuple[float, bool, dict[Tensor, np.ndarray]]:
    with GradTape() as tape:
        logits = forward(lg.graph, params, rng=rng, training=True, masks=masks)
        loss = cross_entropy(logits, lg.class_id)
        grads = backward(loss, tape)
    hit = int(np.argmax(logits.data)) == lg.class_id
    return loss.item(), hit, grads


def train(spec: DatasetSpec, cfg: ModelConfig, steps: int, batch_size: int,
          seed: int, log_every: int | None = None
          ) -> tuple[ModelParams, TrainReport]:
    """Stream batches from the seeded generator and apply one Adam update
    per batch on the mean gradient.  A bounded spec is a fixed dataset:
    when steps * batch_size exceeds spec.count the sequence simply starts
    over, so training length is chosen in optimizer steps independently
    of the dataset size.  Fresh identifiers and one dropout sample per
    graph per forward pass.  Deterministic given seed."""
    if steps < 0 or batch_size < 1:
        raise ValueError(f"bad steps={steps} or batch_size={batch_size}")
    params = ModelParams.init(cfg, np.random.default_rng((seed, 0)))
    report = TrainReport()
    if steps == 0:
        return params, report
    if log_every is None:
        log_every = max(1, steps // 20)

    mask_cache: dict[int, HeadMaskSet] = {}
    if spec.count is not None and spec.count <= _CYCLE_LIMIT:
        corpus = materialize(spec)
        if not corpus:
            raise ValueError("training corpus is empty")
        # batches cross epoch boundaries so a corpus size that does not
        # divide batch_size still trains on every graph
        source = _batched(itertools.cycle(corpus), batch_size)
        for lg in corpus:
            mask_cache[id(lg)] = build_head_masks(lg.graph, cfg)
    elif spec.count is not None:
        if spec.count < 1:
            raise ValueError("training corpus is empty")
        # bounded dataset too large to hold: replay the seeded stream,
        # which regenerates the identical graph sequence each pass
        source = _batched(itertools.chain.from_iterable(
            stream(spec) for _ in itertools.count()), batch_size)
    else:
        source = _batched(stream(spec), batch_size)

    model_rng = np.random.default_rng((seed, 1))
    state = init_adam(params)
    for step in range(1, steps + 1):
        batch = next(source)
        total = {name: np.zeros_like(t.data)
                 for name, t in params.tensors.items()}
        loss_sum = 0.0
        hits = 0
        for lg in batch:
            masks = mask_cache.get(id(lg))
            if masks is None:
                masks = build_head_masks(lg.graph, cfg)
            loss_val, hit, grads = _graph_pass(lg, params, masks, model_rng)
            if not np.isfinite(loss_val):
                raise DivergenceError(step, loss_val)
            loss_sum += loss_val
            hits += hit
            for name, t in params.tensors.items():
                g = grads.get(t)
                if g is not None:
                    total[name] += g
        for name in total:
            total[name] /= len(batch)
        adam_step(state, total, params)
        if step % log_every == 0 or step == steps:
            report.log.append(LogRow(step, loss_sum / len(batch),
                                     hits / len(batch)))
    return params, report


def evaluate(params: ModelParams, eval_set: Sequence[LabeledGraph],
             resamples: int = 15, seed: int = 0) -> EvalStats:
    """Accuracy statistics over ``resamples`` independent eval passes;
    each pass redraws identifiers per graph, no head dropout.  std is
    the population std over resample accuracies."""
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    if not eval_set:
        raise ValueError("eval set is empty")
    masks = [build_head_masks(lg.graph, params.cfg) for lg in eval_set]
    accs = []
    for r in range(resamples):
        rng = np.random.default_rng((seed, r))
        correct = 0
        for lg, mk in zip(eval_set, masks):
            logits = forward(lg.graph, params, rng=rng, masks=mk)
            correct += int(np.argmax(logits.data)) == lg.class_id
        accs.append(correct / len(eval_set))
    arr = np.array(accs)
    return EvalStats(float(arr.mean()), float(arr.std()),
                     float(arr.min()), float(arr.max()), tuple(accs))
