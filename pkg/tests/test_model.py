"""Model configuration, masks, embeddings, attention, and full passes."""

import numpy as np
import pytest

from expgnn import tensor as T
from expgnn.graphs import Graph, adjacency, permute, window_sequence
from expgnn.model import (HEAD_KINDS, ModelConfig, ModelParams,
                          attention_head, build_head_masks, build_head_specs,
                          forward, fused_heads, initial_embeddings,
                          layer_forward, readout, sample_head_dropout)

SMALL = ModelConfig(n_node_labels=2, n_edge_labels=2, n_classes=3,
                    n_layers=2, d_model=10, d_qk=4, d_v=5,
                    heads_per_type=2, random_id_width=4)


def small_graph() -> Graph:
    return Graph(6, (0, 1, 0, 1, 0, 1),
                 frozenset({(0, 1, 0), (1, 2, 1), (2, 3, 0), (3, 4, 1),
                            (4, 5, 0), (5, 0, 1), (1, 4, 0)}))


# --- config ----------------------------------------------------------------------


def test_config_default_random_width_is_half():
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2)
    assert cfg.random_id_width == 64
    assert cfg.label_width == 64


def test_config_zero_random_width_allowed():
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                      random_id_width=0)
    assert cfg.label_width == cfg.d_model


def test_config_validation():
    with pytest.raises(ValueError, match="head_drop_p"):
        ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                    head_drop_p=1.0)
    with pytest.raises(ValueError, match="random_id_width"):
        ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                    d_model=8, random_id_width=8)
    with pytest.raises(ValueError, match="n_classes"):
        ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=0)
    with pytest.raises(ValueError, match="head types"):
        ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                    head_types=("sideways",))


def test_head_specs_counts():
    specs = build_head_specs(SMALL)
    # neighbor appears per edge label per replica, other kinds per replica
    assert len(specs) == 2 * 2 + 4 * 2
    neigh = [s for s in specs if s.kind == "neighbor"]
    assert {(s.replica, s.edge_label) for s in neigh} == \
        {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert all(s.edge_label is None for s in specs if s.kind != "neighbor")


# --- params ----------------------------------------------------------------------


def test_params_shapes_and_names():
    params = ModelParams.init(SMALL, np.random.default_rng(0))
    specs = build_head_specs(SMALL)
    assert params.tensors["label_embedding"].shape == (2, 6)
    n_tensors = 1 + 3 * len(specs) + 6 * SMALL.n_layers + 4
    assert len(params.tensors) == n_tensors
    for hp in params.heads:
        assert hp.wq.shape == (10, 4)
        assert hp.wv.shape == (10, 5)
    inner, outer = params.fnn[0]
    assert inner.proj.shape == (10 + len(specs) * 5, 10)
    assert outer.proj.shape == (10, 10)
    assert all(t.requires_grad for t in params.tensors.values())


def test_params_save_load_round_trip(tmp_path):
    params = ModelParams.init(SMALL, np.random.default_rng(1))
    f = tmp_path / "ckpt.npz"
    params.save(f)
    back = ModelParams.load(f)
    assert back.cfg == SMALL
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(back.tensors[name].data, t.data)


def test_params_load_rejects_foreign_archive(tmp_path):
    f = tmp_path / "junk.npz"
    np.savez(f, a=np.zeros(3))
    with pytest.raises(ValueError, match="checkpoint"):
        ModelParams.load(f)


def test_params_load_rejects_bad_version(tmp_path):
    params = ModelParams.init(SMALL, np.random.default_rng(1))
    f = tmp_path / "ckpt.npz"
    params.save(f)
    data = dict(np.load(f, allow_pickle=False))
    data["format_version"] = np.array(99)
    np.savez(f, **data)
    with pytest.raises(ValueError, match="version"):
        ModelParams.load(f)


# --- masks -----------------------------------------------------------------------


def test_masks_edgeless_graph_only_global():
    g = Graph(4, (0,) * 4, frozenset())
    masks = build_head_masks(g, SMALL)
    for sp, m in zip(masks.specs, masks.layers[0]):
        assert m.any() == (sp.kind == "global")


def test_masks_follow_window_sequence():
    g = small_graph()
    masks = build_head_masks(g, SMALL)
    wins = window_sequence(adjacency(g), SMALL.n_layers)
    for k in range(SMALL.n_layers):
        for sp, m in zip(masks.specs, masks.layers[k]):
            if sp.kind == "expanding":
                np.testing.assert_array_equal(m, wins[k].bits)
            elif sp.kind == "reversed_expanding":
                np.testing.assert_array_equal(m, wins[k].bits.T)
            elif sp.kind == "neighbor":
                np.testing.assert_array_equal(
                    m, adjacency(g, edge_label=sp.edge_label).bits)
            elif sp.kind == "reversed_neighbor":
                np.testing.assert_array_equal(m, adjacency(g).bits.T)
            else:
                assert m.all()


def test_masks_directed_path_distance_4():
    g = Graph(5, (0,) * 5, frozenset({(i, i + 1, 0) for i in range(4)}))
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                      n_layers=3, d_model=8, d_qk=2, d_v=2,
                      heads_per_type=1, random_id_width=4)
    masks = build_head_masks(g, cfg)
    expanding = [m for sp, m in zip(masks.specs, masks.layers[2])
                 if sp.kind == "expanding"]
    assert expanding[0][4, 0]  # distance 4 within reach 2**2


def test_mask_stacks_mirror_lists():
    masks = build_head_masks(small_graph(), SMALL)
    for row, stack in zip(masks.layers, masks.stacks):
        np.testing.assert_array_equal(np.stack(row), stack)


# --- initial embeddings -----------------------------------------------------------


def test_embeddings_layout():
    params = ModelParams.init(SMALL, np.random.default_rng(2))
    g = small_graph()
    x = initial_embeddings(g, params, np.random.default_rng(3))
    assert x.shape == (6, 10)
    emb = params.label_embedding.data
    for i, lab in enumerate(g.node_labels):
        np.testing.assert_array_equal(x.data[i, :6], emb[lab])
        assert set(np.unique(x.data[i, 6:])) <= {0.0, 1.0}


def test_embeddings_resample_per_call():
    params = ModelParams.init(SMALL, np.random.default_rng(2))
    g = small_graph()
    rng = np.random.default_rng(4)
    a = initial_embeddings(g, params, rng)
    b = initial_embeddings(g, params, rng)
    assert not np.array_equal(a.data[:, 6:], b.data[:, 6:])


def test_embeddings_zero_width_degenerate():
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                      d_model=8, d_qk=2, d_v=2, random_id_width=0)
    params = ModelParams.init(cfg, np.random.default_rng(5))
    g = Graph(3, (0, 0, 0), frozenset())
    x = initial_embeddings(g, params)
    assert x.shape == (3, 8)
    assert np.ptp(x.data, axis=0).max() == 0.0  # all rows identical


def test_embeddings_unknown_label_rejected():
    params = ModelParams.init(SMALL, np.random.default_rng(6))
    g = Graph(2, (0, 5), frozenset())
    with pytest.raises(ValueError, match="label"):
        initial_embeddings(g, params, np.random.default_rng(0))


def test_embeddings_identifier_shape_checked():
    params = ModelParams.init(SMALL, np.random.default_rng(6))
    with pytest.raises(ValueError, match="shape"):
        initial_embeddings(small_graph(), params,
                           identifiers=np.zeros((6, 3)))


def test_embeddings_bernoulli_mean():
    params = ModelParams.init(SMALL, np.random.default_rng(2))
    g = small_graph()
    rng = np.random.default_rng(7)
    draws = [initial_embeddings(g, params, rng).data[:, 6:] for _ in range(100)]
    mean = np.mean(draws)
    assert abs(mean - 0.5) < 0.03


# --- dropout ---------------------------------------------------------------------


def test_dropout_never_in_eval():
    rng = np.random.default_rng(8)
    for _ in range(50):
        assert sample_head_dropout(SMALL, rng, training=False) == frozenset()


def test_dropout_zero_probability():
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=2,
                      head_drop_p=0.0)
    rng = np.random.default_rng(9)
    for _ in range(50):
        assert sample_head_dropout(cfg, rng, training=True) == frozenset()


def test_dropout_frequency_rough():
    rng = np.random.default_rng(10)
    drops = 0
    trials = 2000
    for _ in range(trials):
        drops += len(sample_head_dropout(SMALL, rng, training=True))
    freq = drops / (trials * len(SMALL.head_types))
    assert abs(freq - SMALL.head_drop_p) < 0.02


def test_dropout_needs_rng_in_training():
    with pytest.raises(ValueError):
        sample_head_dropout(SMALL, None, training=True)


# --- attention --------------------------------------------------------------------


def test_attention_all_false_mask_zero_output():
    params = ModelParams.init(SMALL, np.random.default_rng(11))
    x = T.Tensor(np.random.default_rng(12).normal(size=(4, 10)))
    out = attention_head(x, params.heads[0], np.zeros((4, 4), dtype=bool), 4)
    np.testing.assert_array_equal(out.data, np.zeros((4, 5)))


def test_attention_singleton_softmax_is_identity():
    params = ModelParams.init(SMALL, np.random.default_rng(13))
    x = T.Tensor(np.random.default_rng(14).normal(size=(1, 10)))
    out = attention_head(x, params.heads[0], np.ones((1, 1), dtype=bool), 4)
    np.testing.assert_allclose(out.data, x.data @ params.heads[0].wv.data)


def test_attention_uniform_scores_average():
    params = ModelParams.init(SMALL, np.random.default_rng(15))
    hp = params.heads[0]
    hp.wq.data[:] = 0.0    # constant scores -> uniform weights over mask
    x = T.Tensor(np.random.default_rng(16).normal(size=(5, 10)))
    mask = np.zeros((5, 5), dtype=bool)
    mask[0, [1, 3]] = True
    out = attention_head(x, hp, mask, 4)
    v = x.data @ hp.wv.data
    np.testing.assert_allclose(out.data[0], (v[1] + v[3]) / 2)


def test_fused_matches_per_head_path():
    rng = np.random.default_rng(17)
    params = ModelParams.init(SMALL, rng)
    g = small_graph()
    masks = build_head_masks(g, SMALL)
    ids = rng.integers(0, 2, (6, 4)).astype(np.float64)
    keep = np.ones(len(params.specs))
    keep[3] = 0.0
    probe = rng.uniform(-1, 1, (len(params.specs) * 5, 6))

    def run(fused: bool):
        with T.GradTape() as tape:
            x = initial_embeddings(g, params, identifiers=ids)
            if fused:
                block = fused_heads(x, params.heads, masks.stacks[0],
                                    SMALL.d_qk, keep)
            else:
                parts = [T.scale(attention_head(x, hp, m, SMALL.d_qk), k)
                         for hp, m, k in zip(params.heads, masks.layers[0], keep)]
                block = T.concat_last(parts)
            loss = T.sum_all(T.matmul(block, T.Tensor(probe)))
            grads = T.backward(loss, tape)
        return block.data.copy(), grads

    out_f, g_f = run(True)
    out_r, g_r = run(False)
    np.testing.assert_allclose(out_f, out_r, atol=1e-12)
    assert set(g_f) == set(g_r)
    for leaf, arr in g_r.items():
        np.testing.assert_allclose(g_f[leaf], arr, atol=1e-10)


def test_fused_dropped_head_gets_no_gradient():
    rng = np.random.default_rng(18)
    params = ModelParams.init(SMALL, rng)
    g = small_graph()
    masks = build_head_masks(g, SMALL)
    keep = np.ones(len(params.specs))
    keep[0] = 0.0
    with T.GradTape() as tape:
        x = initial_embeddings(g, params, rng)
        block = fused_heads(x, params.heads, masks.stacks[0], SMALL.d_qk, keep)
        grads = T.backward(T.sum_all(block), tape)
    dropped = params.heads[0]
    for t in (dropped.wq, dropped.wk, dropped.wv):
        assert t not in grads or not grads[t].any()
    # value weights see gradient whenever the head attends at all; the query
    # weights of a sparse neighbor head can be legitimately zero (one-entry
    # softmax rows are constant), so check a kept head's wv and the dense
    # global head's wq instead
    assert grads[params.heads[1].wv].any()
    global_idx = next(i for i, sp in enumerate(params.specs)
                      if sp.kind == "global")
    assert grads[params.heads[global_idx].wq].any()


# --- layer / readout / forward ----------------------------------------------------


def test_layer_forward_preserves_shape():
    params = ModelParams.init(SMALL, np.random.default_rng(19))
    g = small_graph()
    masks = build_head_masks(g, SMALL)
    x = initial_embeddings(g, params, np.random.default_rng(20))
    out = layer_forward(x, params, 0, masks, frozenset())
    assert out.shape == (6, 10)
    assert np.isfinite(out.data).all()


def test_layer_forward_all_heads_dropped_is_finite():
    params = ModelParams.init(SMALL, np.random.default_rng(21))
    g = small_graph()
    masks = build_head_masks(g, SMALL)
    x = initial_embeddings(g, params, np.random.default_rng(22))
    out = layer_forward(x, params, 0, masks, frozenset(HEAD_KINDS))
    assert np.isfinite(out.data).all()
    assert out.shape == (6, 10)


def test_readout_single_node():
    params = ModelParams.init(SMALL, np.random.default_rng(23))
    x = T.Tensor(np.random.default_rng(24).normal(size=(1, 10)))
    logits = readout(x, np.ones(1, dtype=bool), params.readout)
    assert logits.shape == (3,)


def test_readout_order_free():
    params = ModelParams.init(SMALL, np.random.default_rng(25))
    rows = np.random.default_rng(26).normal(size=(5, 10))
    a = readout(T.Tensor(rows), np.ones(5, dtype=bool), params.readout)
    b = readout(T.Tensor(rows[::-1].copy()), np.ones(5, dtype=bool),
                params.readout)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_forward_deterministic_given_identifiers():
    params = ModelParams.init(SMALL, np.random.default_rng(27))
    g = small_graph()
    ids = np.random.default_rng(28).integers(0, 2, (6, 4)).astype(np.float64)
    a = forward(g, params, identifiers=ids)
    b = forward(g, params, identifiers=ids)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_equivariance_example():
    params = ModelParams.init(SMALL, np.random.default_rng(29))
    g = small_graph()
    rng = np.random.default_rng(30)
    ids = rng.integers(0, 2, (6, 4)).astype(np.float64)
    perm = tuple(int(p) for p in rng.permutation(6))
    gp = permute(g, perm)
    ids_p = np.empty_like(ids)
    for i, p in enumerate(perm):
        ids_p[p] = ids[i]
    a = forward(g, params, identifiers=ids)
    b = forward(gp, params, identifiers=ids_p)
    np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_forward_collapse_configuration():
    # no identifiers, uniform labels, same-input heads only: outputs
    # cannot depend on which 4-regular circulant came in
    from expgnn.datasets import gen_csl
    cfg = ModelConfig(n_node_labels=1, n_edge_labels=1, n_classes=4,
                      n_layers=2, d_model=8, d_qk=3, d_v=3,
                      heads_per_type=1, random_id_width=0,
                      head_types=("neighbor", "global"))
    params = ModelParams.init(cfg, np.random.default_rng(31))
    a = forward(gen_csl(13, 2), params)
    b = forward(gen_csl(13, 3), params)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_forward_needs_rng_for_fresh_identifiers():
    params = ModelParams.init(SMALL, np.random.default_rng(32))
    with pytest.raises(ValueError, match="rng"):
        forward(small_graph(), params)
