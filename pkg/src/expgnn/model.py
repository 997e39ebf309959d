"""Graph attention network with expanding windows and random identifiers.

Architecture: node embeddings start as a learned label embedding
concatenated with a fresh Bernoulli(1/2) 0/1 identifier vector.  Each
layer runs masked attention heads over five window families (incoming
neighbors per edge label, reversed neighbors, expanding reach, reversed
expanding reach, global), concatenates the head outputs with the layer
input, pushes that through two normalized affine stages with an inner
ReLU, and adds the result residually.  Readout is a per-feature max over
nodes followed by a two-layer classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .graphs import AdjMatrix, Graph, adjacency, window_sequence
from .tensor import NormParams, Tensor

HEAD_KINDS = ("neighbor", "reversed_neighbor", "expanding",
              "reversed_expanding", "global")


@dataclass(frozen=True)
class ModelConfig:
    n_node_labels: int
    n_edge_labels: int
    n_classes: int
    n_layers: int = 3
    d_model: int = 128
    d_qk: int = 32
    d_v: int = 32
    heads_per_type: int = 3
    head_drop_p: float = 0.1
    random_id_width: int | None = None   # None = d_model // 2
    head_types: tuple[str, ...] = HEAD_KINDS

    def __post_init__(self):
        if self.random_id_width is None:
            object.__setattr__(self, "random_id_width", self.d_model // 2)
        if isinstance(self.head_types, list):
            object.__setattr__(self, "head_types", tuple(self.head_types))
        for k in ("n_node_labels", "n_edge_labels", "n_classes", "n_layers",
                  "d_model", "d_qk", "d_v", "heads_per_type"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive, got {getattr(self, k)}")
        if not (0.0 <= self.head_drop_p < 1.0):
            raise ValueError(f"head_drop_p must be in [0, 1), "
                             f"got {self.head_drop_p}")
        # random_id_width = 0 is the documented no-random-init ablation;
        # the label embedding must keep positive width either way.
        if not (0 <= self.random_id_width < self.d_model):
            raise ValueError(f"random_id_width must be in [0, d_model), "
                             f"got {self.random_id_width}")
        bad = [t for t in self.head_types if t not in HEAD_KINDS]
        if bad or not self.head_types:
            raise ValueError(f"invalid head types {bad or self.head_types}")

    @property
    def label_width(self) -> int:
        return self.d_model - self.random_id_width


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    replica: int
    edge_label: int | None = None   # set for neighbor heads only


def build_head_specs(cfg: ModelConfig) -> tuple[HeadSpec, ...]:
    """Head list in canonical order; neighbor heads appear once per edge
    label per replica, every other kind once per replica."""
    specs = []
    for kind in cfg.head_types:
        for replica in range(cfg.heads_per_type):
            if kind == "neighbor":
                for lab in range(cfg.n_edge_labels):
                    specs.append(HeadSpec(kind, replica, lab))
            else:
                specs.append(HeadSpec(kind, replica))
    return tuple(specs)


@dataclass
class HeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class ReadoutParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class ModelParams:
    """All learnable tensors, addressable by stable names.

    Head projections are shared across layers (the per-layer variation
    comes from the masks); each layer owns its two FNN normalization
    stages.  ``tensors`` maps name -> Tensor for the optimizer and the
    checkpoint format.
    """

    FORMAT_VERSION = 1

    def __init__(self, cfg: ModelConfig, label_embedding: Tensor,
                 heads: list[HeadParams], fnn: list[tuple[NormParams, NormParams]],
                 readout: ReadoutParams):
        self.cfg = cfg
        self.specs = build_head_specs(cfg)
        self.label_embedding = label_embedding
        self.heads = heads
        self.fnn = fnn
        self.readout = readout
        self.tensors: dict[str, Tensor] = {"label_embedding": label_embedding}
        for i, (spec, hp) in enumerate(zip(self.specs, heads)):
            tag = f"head{i:02d}_{spec.kind}"
            if spec.edge_label is not None:
                tag += f"_e{spec.edge_label}"
            tag += f"_r{spec.replica}"
            self.tensors[f"{tag}_wq"] = hp.wq
            self.tensors[f"{tag}_wk"] = hp.wk
            self.tensors[f"{tag}_wv"] = hp.wv
        for l, (inner, outer) in enumerate(fnn):
            for stage, p in (("inner", inner), ("outer", outer)):
                self.tensors[f"layer{l}_{stage}_proj"] = p.proj
                self.tensors[f"layer{l}_{stage}_gain"] = p.gain
                self.tensors[f"layer{l}_{stage}_bias"] = p.bias
        self.tensors["readout_w1"] = readout.w1
        self.tensors["readout_b1"] = readout.b1
        self.tensors["readout_w2"] = readout.w2
        self.tensors["readout_b2"] = readout.b2

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        def param(arr: np.ndarray) -> Tensor:
            return Tensor(arr, requires_grad=True)

        def norm(fan_in: int, fan_out: int) -> NormParams:
            return NormParams(proj=param(_glorot(rng, fan_in, fan_out)),
                              gain=param(np.ones(fan_out)),
                              bias=param(np.zeros(fan_out)))

        emb = param(_glorot(rng, cfg.n_node_labels, cfg.label_width))
        specs = build_head_specs(cfg)
        heads = [HeadParams(wq=param(_glorot(rng, cfg.d_model, cfg.d_qk)),
                            wk=param(_glorot(rng, cfg.d_model, cfg.d_qk)),
                            wv=param(_glorot(rng, cfg.d_model, cfg.d_v)))
                 for _ in specs]
        concat_width = cfg.d_model + len(specs) * cfg.d_v
        fnn = [(norm(concat_width, cfg.d_model), norm(cfg.d_model, cfg.d_model))
               for _ in range(cfg.n_layers)]
        readout = ReadoutParams(
            w1=param(_glorot(rng, cfg.d_model, cfg.d_model)),
            b1=param(np.zeros(cfg.d_model)),
            w2=param(_glorot(rng, cfg.d_model, cfg.n_classes)),
            b2=param(np.zeros(cfg.n_classes)))
        return cls(cfg, emb, heads, fnn, readout)

    # Checkpoint layout: one npz archive holding every named parameter
    # array plus "config_json" (the ModelConfig as JSON) and
    # "format_version".  Round-trip is value-exact (float64 throughout).

    def save(self, path: str | Path) -> None:
        payload = {name: t.data for name, t in self.tensors.items()}
        payload["config_json"] = np.array(json.dumps(asdict(self.cfg)))
        payload["format_version"] = np.array(self.FORMAT_VERSION)
        np.savez(path, **payload)

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        with np.load(path, allow_pickle=False) as npz:
            if not {"format_version", "config_json"} <= set(npz.files):
                raise ValueError("not a model checkpoint: header fields "
                                 "missing from archive")
            version = int(npz["format_version"])
            if version != cls.FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            cfg = ModelConfig(**json.loads(str(npz["config_json"])))
            params = cls.init(cfg, np.random.default_rng(0))
            stored = {k for k in npz.files
                      if k not in ("config_json", "format_version")}
            if stored != set(params.tensors):
                raise ValueError("checkpoint parameter names do not match "
                                 "the configured model")
            for name, t in params.tensors.items():
                arr = npz[name]
                if arr.shape != t.data.shape:
                    raise ValueError(f"checkpoint shape mismatch for {name}: "
                                     f"{arr.shape} vs {t.data.shape}")
                t.data = np.ascontiguousarray(arr, dtype=np.float64)
        return params


@dataclass
class HeadMaskSet:
    """Per layer, per head spec: an n-by-n boolean attention mask.
    Replicas of one kind share the same underlying array.  ``stacks``
    holds the same masks as one (heads, n, n) array per layer for the
    batched attention path."""

    layers: list[list[np.ndarray]]
    specs: tuple[HeadSpec, ...] = field(repr=False)
    stacks: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.stacks:
            self.stacks = [np.ascontiguousarray(np.stack(row))
                           for row in self.layers]


def build_head_masks(g: Graph, cfg: ModelConfig) -> HeadMaskSet:
    """Masks per layer and head: per-edge-label adjacency for neighbor
    heads, transposed merged adjacency for reversed ones, the doubling
    reach windows (distance 1..2**k at layer k) for expanding heads and
    their transposes, and all-pairs for global heads."""
    specs = build_head_specs(cfg)
    merged = adjacency(g)
    by_label = {lab: adjacency(g, edge_label=lab).bits
                for lab in range(cfg.n_edge_labels)}
    rev_merged = merged.bits.T.copy()
    windows = window_sequence(merged, cfg.n_layers)
    rev_windows = [w.bits.T.copy() for w in windows]
    everyone = np.ones((g.n, g.n), dtype=bool)

    layers = []
    for k in range(cfg.n_layers):
        row = []
        for sp in specs:
            if sp.kind == "neighbor":
                row.append(by_label[sp.edge_label])
            elif sp.kind == "reversed_neighbor":
                row.append(rev_merged)
            elif sp.kind == "expanding":
                row.append(windows[k].bits)
            elif sp.kind == "reversed_expanding":
                row.append(rev_windows[k])
            else:
                row.append(everyone)
        layers.append(row)
    return HeadMaskSet(layers, specs)


def initial_embeddings(g: Graph, params: ModelParams,
                       rng: np.random.Generator | None = None,
                       identifiers: np.ndarray | None = None) -> Tensor:
    """Rows = label embedding || 0/1 identifier vector.

    Identifiers are fresh Bernoulli(1/2) draws per call (per graph
    instance), or the provided array when reproducibility across calls
    is needed; no gradient flows into them.
    """
    cfg = params.cfg
    labels = np.asarray(g.node_labels)
    if labels.max() >= cfg.n_node_labels:
        raise ValueError(f"node label {labels.max()} outside embedding table "
                         f"of {cfg.n_node_labels} rows")
    emb = T.gather_rows(params.label_embedding, labels)
    w = cfg.random_id_width
    if identifiers is None:
        if w == 0:
            identifiers = np.zeros((g.n, 0))
        elif rng is None:
            raise ValueError("need an rng when identifiers are not supplied")
        else:
            identifiers = rng.integers(0, 2, (g.n, w)).astype(np.float64)
    if identifiers.shape != (g.n, w):
        raise ValueError(f"identifiers must have shape {(g.n, w)}, "
                         f"got {identifiers.shape}")
    return T.concat_last([emb, Tensor(identifiers)])


def sample_head_dropout(cfg: ModelConfig, rng: np.random.Generator | None,
                        training: bool) -> frozenset[str]:
    """Window kinds to ignore this forward pass: in training each kind
    drops independently with head_drop_p, in eval nothing drops.  No
    rescaling anywhere."""
    if not training or cfg.head_drop_p == 0.0:
        return frozenset()
    if rng is None:
        raise ValueError("need an rng to sample dropout in training mode")
    return frozenset(k for k in cfg.head_types
                     if rng.random() < cfg.head_drop_p)


def attention_head(x: Tensor, hp: HeadParams, mask: np.ndarray,
                   d_qk: int) -> Tensor:
    scores = T.scale(T.matmul(T.matmul(x, hp.wq), T.transpose(T.matmul(x, hp.wk))),
                     1.0 / np.sqrt(d_qk))
    weights = T.masked_softmax(scores, mask)
    return T.matmul(weights, T.matmul(x, hp.wv))


def fused_heads(x: Tensor, heads: list[HeadParams], mask_stack: np.ndarray,
                d_qk: int, keep: np.ndarray) -> Tensor:
    """Every attention head of one layer in a single batched pass.

    Numerically identical to running :func:`attention_head` per head and
    concatenating: query/key/value projections are stacked column-wise
    into three wide matmuls and the soft-max runs over a (heads, n, n)
    score block.  ``keep`` is a 0/1 vector over heads; dropped heads
    produce zero output blocks and receive zero gradient.
    """
    n = x.data.shape[0]
    h = len(heads)
    d_v = heads[0].wv.data.shape[1]
    if mask_stack.shape != (h, n, n) or mask_stack.dtype != np.bool_:
        raise T.ShapeError(f"mask stack must be bool ({h}, {n}, {n})")
    wq_all = np.concatenate([hp.wq.data for hp in heads], axis=1)
    wk_all = np.concatenate([hp.wk.data for hp in heads], axis=1)
    wv_all = np.concatenate([hp.wv.data for hp in heads], axis=1)
    # (h, n, d) stacks so the score/value products run as one batched matmul
    qh = np.ascontiguousarray((x.data @ wq_all).reshape(n, h, d_qk).transpose(1, 0, 2))
    kh = np.ascontiguousarray((x.data @ wk_all).reshape(n, h, d_qk).transpose(1, 0, 2))
    vh = np.ascontiguousarray((x.data @ wv_all).reshape(n, h, d_v).transpose(1, 0, 2))
    inv_scale = 1.0 / np.sqrt(d_qk)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv_scale

    any_row = mask_stack.any(axis=2, keepdims=True)
    neg = np.where(mask_stack, scores, -np.inf)
    row_max = np.where(any_row, neg.max(axis=2, keepdims=True), 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(np.where(mask_stack, scores - row_max, -np.inf))
    denom = e.sum(axis=2, keepdims=True)
    alpha = np.divide(e, denom, out=np.zeros_like(e), where=any_row)

    out = (alpha @ vh) * keep[:, None, None]            # (h, n, d_v)
    out_flat = out.transpose(1, 0, 2).reshape(n, h * d_v)

    # All leaf gradients come from one shared chain; cache it per output
    # gradient so the tape's per-leaf pulls do not recompute it.
    cache: dict = {"key": None}

    def common(g: np.ndarray):
        if cache["key"] is not g:
            gh = g.reshape(n, h, d_v).transpose(1, 0, 2) * keep[:, None, None]
            g_v = alpha.transpose(0, 2, 1) @ gh
            g_alpha = gh @ vh.transpose(0, 2, 1)
            inner = (g_alpha * alpha).sum(axis=2, keepdims=True)
            g_scores = alpha * (g_alpha - inner) * inv_scale
            g_q = g_scores @ kh
            g_k = g_scores.transpose(0, 2, 1) @ qh
            gq_flat = g_q.transpose(1, 0, 2).reshape(n, h * d_qk)
            gk_flat = g_k.transpose(1, 0, 2).reshape(n, h * d_qk)
            gv_flat = g_v.transpose(1, 0, 2).reshape(n, h * d_v)
            g_x = gq_flat @ wq_all.T + gk_flat @ wk_all.T + gv_flat @ wv_all.T
            cache["key"] = g
            cache["val"] = (g_x,
                            x.data.T @ gq_flat,
                            x.data.T @ gk_flat,
                            x.data.T @ gv_flat)
        return cache["val"]

    pulls = [(x, lambda g: common(g)[0])]
    for i, hp in enumerate(heads):
        def pq(g, i=i):
            return common(g)[1][:, i * d_qk:(i + 1) * d_qk].copy()

        def pk(g, i=i):
            return common(g)[2][:, i * d_qk:(i + 1) * d_qk].copy()

        def pv(g, i=i):
            return common(g)[3][:, i * d_v:(i + 1) * d_v].copy()

        pulls += [(hp.wq, pq), (hp.wk, pk), (hp.wv, pv)]
    return T.record(out_flat, pulls)


def layer_forward(x: Tensor, params: ModelParams, layer_idx: int,
                  masks: HeadMaskSet, dropped: frozenset[str]) -> Tensor:
    cfg = params.cfg
    keep = np.array([0.0 if sp.kind in dropped else 1.0
                     for sp in params.specs])
    head_block = fused_heads(x, params.heads, masks.stacks[layer_idx],
                             cfg.d_qk, keep)
    inner, outer = params.fnn[layer_idx]
    h = T.layer_norm(T.concat_last([x, head_block]), inner)
    h = T.layer_norm(T.relu(h), outer)
    return T.relu(T.add(x, h))


def readout(x: Tensor, valid: np.ndarray, ro: ReadoutParams) -> Tensor:
    pooled = T.reduce_max_rows(x, valid)
    hidden = T.relu(T.affine(pooled, ro.w1, ro.b1))
    logits = T.affine(hidden, ro.w2, ro.b2)
    return T.reshape(logits, (logits.data.size,))


def forward(g: Graph, params: ModelParams,
            rng: np.random.Generator | None = None,
            training: bool = False,
            identifiers: np.ndarray | None = None,
            dropped: frozenset[str] | None = None,
            masks: HeadMaskSet | None = None) -> Tensor:
    """Full pass to class logits.  One dropout sample and one identifier
    draw cover all layers of a single call."""
    cfg = params.cfg
    if masks is None:
        masks = build_head_masks(g, cfg)
    if dropped is None:
        dropped = sample_head_dropout(cfg, rng, training)
    x = initial_embeddings(g, params, rng, identifiers)
    for layer_idx in range(cfg.n_layers):
        x = layer_forward(x, params, layer_idx, masks, dropped)
    return readout(x, np.ones(g.n, dtype=bool), params.readout)
