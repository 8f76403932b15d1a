import math

import numpy as np
import pytest

from gnmr import ndgrad as nd
from gnmr.graph import MultiBehaviorGraph
from gnmr.interactions import InteractionTensor, SynthSpec, synth_generate
from gnmr.model import (
    GNMR,
    AblationFlags,
    HyperParams,
    LayerTrace,
    behavior_message,
    cross_behavior_attention,
    forward,
    gated_aggregate,
    init_params,
    propagate_layer,
    score,
)
from gnmr.ndgrad import Tensor
from gnmr.pretrain import pretrain_init, train_autoencoder

import reference as ref

TOY_EDGES = [(0, 0, 0), (0, 1, 1), (1, 1, 0), (1, 2, 2), (2, 0, 2), (2, 3, 1), (3, 3, 0),
             (3, 2, 2), (4, 4, 1), (4, 0, 2), (0, 4, 2)]


def toy_model(K=3, d=4, C=2, S=2, L=2, n_users=5, n_items=5, seed=0, scale=0.5, **kw):
    hyper = HyperParams(K, d, C, S, gate_hidden=3, layers=L, **kw)
    rng = np.random.default_rng(seed + 100)
    H0 = (scale * rng.standard_normal((n_users, d)), scale * rng.standard_normal((n_items, d)))
    return GNMR.create(hyper, n_users, n_items, K - 1, seed, H0=H0)


def arrays(params):
    return {k: v.data for k, v in params.items()}


# -- behavior_message ------------------------------------------------------------

def _p(**arrays):
    return {k: Tensor(v) for k, v in arrays.items()}


def test_message_of_empty_neighborhood_is_zero():
    hyper = HyperParams(1, dim=3, mem_dims=2, heads=1)
    params = arrays(init_params(hyper, 1, 1, 0))
    out = behavior_message(Tensor(np.zeros((1, 3))), 0, _p(**params), hyper)
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_message_identity_configuration_is_plain_sum():
    hyper = HyperParams(1, dim=3, mem_dims=1, heads=1)
    params = _p(**{"W1.k0": np.zeros((1, 3)), "b1.k0": np.ones(1), "W2.k0": np.eye(3)[None]})
    s = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(behavior_message(Tensor(s), 0, params, hyper).data, s)


def test_message_matches_scalar_hand_evaluation(rng):
    hyper = HyperParams(1, dim=2, mem_dims=2, heads=1)
    W1, b1, W2 = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=(2, 2, 2))
    s = rng.normal(size=2)
    a0 = max(0.0, W1[0, 0] * s[0] + W1[0, 1] * s[1] + b1[0])
    a1 = max(0.0, W1[1, 0] * s[0] + W1[1, 1] * s[1] + b1[1])
    hand = [a0 * (W2[0, r, 0] * s[0] + W2[0, r, 1] * s[1]) + a1 * (W2[1, r, 0] * s[0] + W2[1, r, 1] * s[1])
            for r in range(2)]
    out = behavior_message(Tensor(s[None]), 0, _p(**{"W1.k0": W1, "b1.k0": b1, "W2.k0": W2}), hyper)
    assert np.max(np.abs(out.data[0] - hand)) < 1e-12


def test_message_disabled_returns_neighbor_sum(rng):
    hyper = HyperParams(1, dim=4, heads=1)
    s = Tensor(rng.normal(size=(3, 4)))
    assert behavior_message(s, 0, {}, hyper, AblationFlags(disable_behavior_embedding=True)) is s


def test_message_shape_check():
    with pytest.raises(nd.ShapeError):
        behavior_message(Tensor(np.zeros((1, 3))), 0, {}, HyperParams(1, dim=4, heads=1))


# -- attention --------------------------------------------------------------------

def _attn_params(rng, d, S):
    dh = d // S
    return {f"{kind}.s{s}": rng.normal(size=(dh, d)) for s in range(S) for kind in "QKV"}


def test_attention_singleton_softmax(rng):
    d, S = 4, 2
    p = _attn_params(rng, d, S)
    H = rng.normal(size=(1, 1, d))
    out, beta = cross_behavior_attention(Tensor(H), _p(**p), HyperParams(1, dim=d, heads=S))
    assert np.array_equal(beta.data, np.ones((1, S, 1, 1)))
    expect = np.concatenate([p[f"V.s{s}"] @ H[0, 0] for s in range(S)]) + H[0, 0]
    assert np.max(np.abs(out.data[0, 0] - expect)) < 1e-14


def test_attention_uniform_when_messages_equal(rng):
    d, S, K = 4, 2, 3
    p = _attn_params(rng, d, S)
    for s in range(S):
        p[f"K.s{s}"] = p[f"Q.s{s}"]
    H = np.repeat(rng.normal(size=(1, 1, d)), K, axis=1)
    _, beta = cross_behavior_attention(Tensor(H), _p(**p), HyperParams(K, dim=d, heads=S))
    assert np.max(np.abs(beta.data - 1.0 / K)) < 1e-15


@pytest.mark.parametrize("residual", ["single", "double"])
def test_attention_matches_hand_rolled_oracle(rng, residual):
    d, S, K = 4, 2, 2
    p = _attn_params(rng, d, S)
    msgs = rng.normal(size=(K, d))
    out, beta = cross_behavior_attention(Tensor(msgs[None]), _p(**p), HyperParams(K, dim=d, heads=S, residual=residual))
    recal, betas = ref.attention(msgs.tolist(), [p[f"Q.s{s}"].tolist() for s in range(S)],
                                 [p[f"K.s{s}"].tolist() for s in range(S)],
                                 [p[f"V.s{s}"].tolist() for s in range(S)], residual)
    assert np.max(np.abs(out.data[0] - np.array(recal))) < 1e-10
    assert np.max(np.abs(beta.data[0] - np.array(betas))) < 1e-10


def test_attention_disabled_is_identity(rng):
    H = Tensor(rng.normal(size=(2, 3, 4)))
    out, beta = cross_behavior_attention(H, {}, HyperParams(3, dim=4), AblationFlags(disable_attention=True))
    assert out is H and beta is None


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(nd.ShapeError):
        cross_behavior_attention(Tensor(rng.normal(size=(1, 2, 5))), {}, HyperParams(2, dim=4, heads=2))


# -- gating ------------------------------------------------------------------------

def _gate_params(rng, d, dg=3):
    return {"W3": rng.normal(size=(dg, d)), "w2": rng.normal(size=dg), "b2": rng.normal(size=dg),
            "b3": np.array(rng.normal())}


def test_gate_single_behavior(rng):
    H = rng.normal(size=(2, 1, 4))
    fused, w = gated_aggregate(Tensor(H), _p(**_gate_params(rng, 4)))
    assert np.array_equal(w.data, np.ones((2, 1)))
    assert np.array_equal(fused.data, H[:, 0])


def test_gate_identical_inputs_give_that_vector(rng):
    H = np.repeat(rng.normal(size=(1, 1, 2)), 3, axis=1)
    fused, _ = gated_aggregate(Tensor(H), _p(**_gate_params(rng, 2)))
    assert np.max(np.abs(fused.data[0] - H[0, 0])) < 1e-15


def test_gate_matches_scalar_oracle(rng):
    H = rng.normal(size=(3, 2))
    p = _gate_params(rng, 2)
    fused, w = gated_aggregate(Tensor(H[None]), _p(**p))
    want_f, want_w = ref.gate(H.tolist(), p["W3"].tolist(), p["w2"].tolist(), p["b2"].tolist(), float(p["b3"]))
    assert np.max(np.abs(fused.data[0] - want_f)) < 1e-12
    assert np.max(np.abs(w.data[0] - want_w)) < 1e-12
    assert abs(w.data.sum() - 1.0) < 1e-12


# -- propagation and forward ------------------------------------------------------

def test_isolated_node_gets_constant_from_params():
    m = toy_model(n_users=6)  # user 5 has no edges
    g = MultiBehaviorGraph(6, 5, 3, TOY_EDGES)
    layers = m.forward(g)
    p = arrays(m.params)
    zero_msgs = [[0.0] * 4 for _ in range(3)]
    recal, _ = ref.attention(zero_msgs, [p[f"Q.s{s}"].tolist() for s in range(2)],
                             [p[f"K.s{s}"].tolist() for s in range(2)], [p[f"V.s{s}"].tolist() for s in range(2)])
    fused, _ = ref.gate(recal, p["W3"].tolist(), p["w2"].tolist(), p["b2"].tolist(), float(p["b3"]))
    assert np.array_equal(layers[1][0].data[5], np.zeros(4)) and np.allclose(fused, 0.0)


def test_one_user_one_item_micro_graph_by_hand(rng):
    d = 2
    hyper = HyperParams(1, dim=d, mem_dims=1, heads=1, gate_hidden=1, layers=1)
    p = {"H0.user": np.array([[0.3, -0.7]]), "H0.item": np.array([[1.1, 0.4]]),
         "W1.k0": np.array([[0.5, 0.2]]), "b1.k0": np.array([0.1]), "W2.k0": np.array([[[1.0, 2.0], [0.0, -1.0]]]),
         "Q.s0": rng.normal(size=(2, 2)), "K.s0": rng.normal(size=(2, 2)), "V.s0": np.array([[0.5, 0.0], [0.0, 0.5]]),
         "W3": np.array([[1.0, 1.0]]), "w2": np.array([2.0]), "b2": np.array([0.0]), "b3": np.array(0.0)}
    g = MultiBehaviorGraph(1, 1, 1, [(0, 0, 0)])
    layers = forward(g, _p(**p), hyper)
    # user side by hand: s = item embedding; alpha = relu(0.5*1.1 + 0.2*0.4 + 0.1) = 0.73
    s = np.array([1.1, 0.4])
    alpha = 0.73
    msg = alpha * np.array([1.1 + 0.8, -0.4])
    hu = 0.5 * msg + msg  # K=1: beta = 1, V = I/2, single residual; gate weight 1
    assert np.max(np.abs(layers[1][0].data[0] - hu)) < 1e-12
    assert np.allclose(s, p["H0.item"][0])


def test_depth_zero_is_initial_tables():
    m = toy_model(L=0)
    layers = m.forward(MultiBehaviorGraph(5, 5, 3, TOY_EDGES))
    assert len(layers) == 1
    assert layers[0][0] is m.params["H0.user"] and layers[0][1] is m.params["H0.item"]


def test_two_layers_equal_two_manual_propagations():
    m = toy_model(L=2)
    g = MultiBehaviorGraph(5, 5, 3, TOY_EDGES)
    layers = m.forward(g)
    u1, v1 = propagate_layer(g, m.params["H0.user"], m.params["H0.item"], m.params, m.hyper)
    u2, v2 = propagate_layer(g, u1, v1, m.params, m.hyper)
    assert np.array_equal(layers[2][0].data, u2.data) and np.array_equal(layers[2][1].data, v2.data)


@pytest.mark.parametrize("kw", [
    {}, {"norm": "mean"}, {"residual": "double"}, {"L": 3},
    {"flags": AblationFlags(disable_behavior_embedding=True)},
    {"flags": AblationFlags(disable_attention=True)},
    {"flags": AblationFlags(behavior_mask=(0, 2))},
])
def test_forward_matches_loop_reference(kw):
    flags = kw.pop("flags", AblationFlags())
    L = kw.pop("L", 2)
    m = toy_model(L=L, **kw)
    m = GNMR(m.hyper, m.params, m.n_users, m.n_items, m.target_index, flags)
    g = MultiBehaviorGraph(5, 5, 3, TOY_EDGES)
    layers = m.forward(g)
    want = ref.reference_forward(TOY_EDGES, 5, 5, 3, arrays(m.params), layers=L, heads=2,
                                 active=flags.active(3, 2), norm=m.hyper.norm, residual=m.hyper.residual,
                                 disable_be=flags.disable_behavior_embedding, disable_ma=flags.disable_attention)
    for (hu, hv), (ru, rv) in zip(layers, want):
        assert np.max(np.abs(hu.data - np.array(ru))) < 1e-10
        assert np.max(np.abs(hv.data - np.array(rv))) < 1e-10
    users, items = np.array([0, 1, 4, 2]), np.array([3, 3, 0, 1])
    s = score(layers, users, items).data
    assert np.max(np.abs(s - [ref.reference_score(want, u, j) for u, j in zip(users, items)])) < 1e-10


def test_deep_toy_forward_is_finite_and_bounded():
    m = toy_model(L=3, scale=0.1)
    layers = m.forward(MultiBehaviorGraph(5, 5, 3, TOY_EDGES))
    want = ref.reference_forward(TOY_EDGES, 5, 5, 3, arrays(m.params), layers=3, heads=2)
    for (hu, _), (ru, _) in zip(layers, want):
        assert np.all(np.isfinite(hu.data))
        assert np.linalg.norm(hu.data) <= np.linalg.norm(np.array(ru)) * (1 + 1e-9)


def test_layer_concat_score(rng):
    m = toy_model(score="layer-concat")
    g = MultiBehaviorGraph(5, 5, 3, TOY_EDGES)
    layers = m.forward(g)
    s = score(layers, [1], [2], "layer-concat").data[0]
    assert abs(s - sum(float(hu.data[1] @ hv.data[2]) for hu, hv in layers)) < 1e-12


def test_score_closed_forms():
    e1 = np.array([[1.0, 0.0]])
    layers = [(Tensor(e1), Tensor(e1))]
    assert score(layers, [0], [0]).data[0] == 1.0
    layers = [(Tensor(e1), Tensor([[0.0, 3.0]]))]
    assert score(layers, [0], [0]).data[0] == 0.0
    with pytest.raises(IndexError):
        score(layers, [1], [0])


def test_score_matches_layer_sum_oracle():
    m = toy_model()
    layers = m.forward(MultiBehaviorGraph(5, 5, 3, TOY_EDGES))
    eu = sum(hu.data for hu, _ in layers)
    ev = sum(hv.data for _, hv in layers)
    got = score(layers, np.arange(5), np.arange(5)[::-1]).data
    assert np.max(np.abs(got - np.einsum("nd,nd->n", eu, ev[::-1]))) < 1e-12


# -- invariants ------------------------------------------------------------------

def test_softmax_invariants_on_many_configurations():
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(200):
        K = int(rng.integers(1, 5))
        S = int(rng.choice([1, 2, 4]))
        m = toy_model(K=K, d=4, S=S, L=1, seed=trial, scale=float(rng.uniform(0.05, 2)))
        edges = [(u, j, int(rng.integers(K))) for u in range(5) for j in range(5) if rng.random() < 0.4]
        traces: list[LayerTrace] = []
        m.forward(MultiBehaviorGraph(5, 5, K, edges), traces=traces)
        for side in ("user", "item"):
            beta, gates = traces[0].attention[side].data, traces[0].gates[side].data
            assert beta.min() >= 0 and gates.min() >= 0
            worst = max(worst, np.abs(beta.sum(-1) - 1).max(), np.abs(gates.sum(-1) - 1).max())
    assert worst < 1e-9


def test_single_behavior_is_literal_single_behavior_gnn():
    m = toy_model(K=3, L=2)
    m = GNMR(m.hyper, m.params, 5, 5, 2, AblationFlags(behavior_mask=(2,)))
    traces: list[LayerTrace] = []
    m.forward(MultiBehaviorGraph(5, 5, 3, TOY_EDGES), traces=traces)
    for t in traces:
        for side in ("user", "item"):
            assert np.array_equal(t.attention[side].data, np.ones_like(t.attention[side].data))
            assert np.array_equal(t.gates[side].data, np.ones_like(t.gates[side].data))


def test_behavior_permutation_invariance():
    m = toy_model(K=3, L=2)
    g = MultiBehaviorGraph(5, 5, 3, TOY_EDGES)
    base = m.forward(g)
    perm = [2, 0, 1]  # new index of old behavior k is perm[k]
    edges = [(u, j, perm[k]) for u, j, k in TOY_EDGES]
    params = dict(m.params)
    for k in range(3):
        for stem in ("W1", "b1", "W2"):
            params[f"{stem}.k{perm[k]}"] = m.params[f"{stem}.k{k}"]
    permuted = GNMR(m.hyper, params, 5, 5, perm[2]).forward(MultiBehaviorGraph(5, 5, 3, edges))
    for (a, b), (c, e) in zip(base, permuted):
        assert np.max(np.abs(a.data - c.data)) < 1e-12 and np.max(np.abs(b.data - e.data)) < 1e-12


def test_hyperparameter_validation():
    assert "not divisible" in "; ".join(HyperParams(2, dim=15, heads=2).problems())
    assert HyperParams(2, layers=5).problems()
    with pytest.raises(ValueError):
        AblationFlags(behavior_mask=(0,)).active(3, 2)
    with pytest.raises(ValueError):
        AblationFlags(behavior_mask=()).active(3, 2)


def test_used_params_follow_flags():
    m = toy_model()
    assert set(m.used_params()) == set(m.params)
    be = GNMR(m.hyper, m.params, 5, 5, 2, AblationFlags(disable_behavior_embedding=True, disable_attention=True))
    names = set(be.used_params())
    assert not any(n.startswith(("W1", "b1", "W2", "Q.", "K.", "V.")) for n in names)
    only = GNMR(m.hyper, m.params, 5, 5, 2, AblationFlags(behavior_mask=(2,)))
    assert "W1.k2" in only.used_params() and "W1.k0" not in only.used_params()


def test_checkpoint_round_trip(tmp_path):
    m = toy_model()
    g = MultiBehaviorGraph(5, 5, 3, TOY_EDGES)
    m.save(tmp_path / "m.ckpt", {"seed": 3})
    r = GNMR.load(tmp_path / "m.ckpt")
    assert r.hyper == m.hyper and r.flags == m.flags
    assert np.max(np.abs(r.score_matrix(g, [0, 1], [[0, 1], [2, 3]]) -
                        m.score_matrix(g, [0, 1], [[0, 1], [2, 3]]))) < 1e-12


def test_checkpoint_rejects_tampering(tmp_path):
    d = toy_model().to_dict()
    d["params"]["W3"]["shape"] = [1, 1]
    with pytest.raises(ValueError):
        GNMR.from_dict(d)
    d = toy_model().to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        GNMR.from_dict(d)


def test_non_finite_propagation_names_node():
    m = toy_model(scale=1e150)
    with pytest.raises(nd.NonFiniteError, match="node"):
        m.forward(MultiBehaviorGraph(5, 5, 3, TOY_EDGES))


# -- pretraining ---------------------------------------------------------------

def test_random_init_is_reproducible_with_expected_scale():
    x = synth_generate(SynthSpec(700, 50, 2), 0)
    a = pretrain_init(x, 16, 3, mode="random")
    b = pretrain_init(x, 16, 3, mode="random")
    assert np.array_equal(a[0], b[0])
    assert 0.008 <= a[0].std() <= 0.012


def test_autoencoder_loss_decreases_on_identity_like_toy():
    data = np.eye(4)
    _, losses = train_autoencoder(data, hidden=2, seed=0, epochs=10)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_overcomplete_autoencoder_reconstructs():
    data = np.eye(4)[[0, 1, 2, 3, 0]]
    _, losses = train_autoencoder(data, hidden=8, seed=0, epochs=1500, lr=1e-2)
    assert losses[-1] < 1e-4


def test_autoencoder_tables_are_rescaled_and_empty_rows_fall_back():
    x = InteractionTensor(4, 3, 2, [(0, 0, 0), (1, 1, 1), (2, 2, 0), (2, 0, 1)])  # user 3 has no events
    hu, hv = pretrain_init(x, 4, 0, epochs=20)
    rnd_u, _ = pretrain_init(x, 4, 0, mode="random")
    assert abs(hu[:3].std() - 0.01) < 1e-12
    assert np.array_equal(hu[3], rnd_u[3])
    assert hv.shape == (3, 4)
