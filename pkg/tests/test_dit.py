import numpy as np
import pytest

from fsv import geometry as G
from fsv.dit import (DitConfig, DitLayer, LayerMemoryDiT, LayerMemoryState, Router, TimeEmbedding, context,
                     memory_self_attention, patchify, route, router_heatmap, unpatchify)
from fsv.numerics import Rng, Tensor
from fsv.numerics.ops import attention

CFG = dict(layers=4, dim=8, heads=2, in_channels=3, out_channels=3, ctx_dim=5)


def model(seed=0, **kw):
    cfg = dict(CFG)
    cfg.update(kw)
    return LayerMemoryDiT(DitConfig(**cfg), Rng(seed))


def forward(m, seed=1, text=True):
    rng = Rng(seed, 5)
    z = rng.normal((2, 3, 2, 2, 2))
    ctx = rng.normal((2, 3, 5)) if text else None
    return m(Tensor(z), np.array([0.3, 0.8]), ctx).data


# -- attention ------------------------------------------------------------------------------

def loop_attention(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    d = q.shape[1]
    for i in range(q.shape[0]):
        logits = [sum(q[i, a] * k[j, a] for a in range(d)) / np.sqrt(d) for j in range(k.shape[0])]
        m = max(logits)
        w = [np.exp(x - m) for x in logits]
        s = sum(w)
        for j in range(k.shape[0]):
            out[i] += w[j] / s * v[j]
    return out


def test_attention_matches_loops():
    rng = Rng(0)
    q, k, v = rng.normal((4, 3)), rng.normal((4, 3)), rng.normal((4, 5))
    np.testing.assert_allclose(attention(Tensor(q), Tensor(k), Tensor(v)).data, loop_attention(q, k, v),
                               atol=1e-12, rtol=0)


def test_attention_single_key():
    rng = Rng(1)
    v = rng.normal((1, 4))
    out = attention(Tensor(rng.normal((5, 4))), Tensor(rng.normal((1, 4))), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), atol=1e-15)


def test_attention_equal_logits_gives_mean():
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 1.0], [0.0, -2.0], [0.0, 3.0]])
    v = Rng(2).normal((3, 4))
    np.testing.assert_allclose(attention(Tensor(q), Tensor(k), Tensor(v)).data, v.mean(0, keepdims=True),
                               atol=1e-15)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))))


# -- router -----------------------------------------------------------------------------------

def test_route_uniform_two_reps():
    rng = Rng(3)
    x0, x1 = rng.normal((1, 3, 4)), rng.normal((1, 3, 4))
    r = Router(4, 2, bias_last=0.0)
    out = route(LayerMemoryState([Tensor(x0), Tensor(x1)]), Tensor(rng.normal((1, 3, 4))), r, 2).data
    np.testing.assert_allclose(out, (x0 + x1) / 2, atol=1e-15)


def test_route_one_hot_returns_last():
    rng = Rng(4)
    reps = [Tensor(rng.normal((2, 3, 4))) for _ in range(3)]
    out = route(LayerMemoryState(reps), reps[-1], None, 3, "one_hot_last").data
    np.testing.assert_array_equal(out, reps[-1].data)


def test_route_matches_loop_oracle():
    rng = Rng(5)
    reps = [rng.normal((2, 3, 4)) for _ in range(3)]
    x_mod = rng.normal((2, 3, 4))
    r = Router(4, 3)
    r.weight = Tensor(rng.normal((4, 3)))
    r.bias = Tensor(rng.normal(3))
    state = LayerMemoryState([Tensor(x) for x in reps])
    out = route(state, Tensor(x_mod), r, 3).data
    for b in range(2):
        for i in range(3):
            logits = x_mod[b, i] @ r.weight.data + r.bias.data
            w = np.exp(logits - logits.max())
            w /= w.sum()
            ref = sum(w[j] * reps[j][b, i] for j in range(3))
            np.testing.assert_allclose(out[b, i], ref, atol=1e-12)
            np.testing.assert_allclose(state.router_weights[3][b, i], w, atol=1e-15)


def test_route_rep_count_mismatch():
    reps = [Tensor(np.zeros((1, 2, 4))) for _ in range(3)]
    with pytest.raises(ValueError):
        route(LayerMemoryState(reps), reps[-1], Router(4, 2), 3)


def test_route_identity_below_two_reps():
    x = Tensor(np.ones((1, 2, 4)))
    assert route(LayerMemoryState([x]), x, None, 1) is x


def test_router_weights_are_distributions():
    m = model(router_bias=0.0)
    for layer in m.layers[1:]:
        layer.router.weight = Tensor(Rng(layer.index).normal(layer.router.weight.shape))
    forward(m)
    for l, w in m.last_state.router_weights.items():
        assert w.shape == (2, 8, l)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
        assert w.min() >= 0 and w.max() <= 1


# -- memory attention -------------------------------------------------------------------------

def test_memory_attention_degenerates_to_self_attention():
    rng = Rng(6)
    x = Tensor(rng.normal((1, 4, 8)))
    wq, wk, wv = (Tensor(rng.normal((8, 8))) for _ in range(3))
    a = memory_self_attention(x, x, wq, wk, wv, heads=2).data
    q, k, v = (x.data @ w.data for w in (wq, wk, wv))
    ref = np.concatenate([loop_attention(q[0, :, 4 * h:4 * h + 4], k[0, :, 4 * h:4 * h + 4],
                                         v[0, :, 4 * h:4 * h + 4]) for h in range(2)], axis=1)
    np.testing.assert_allclose(a[0], ref, atol=1e-12)


def test_memory_attention_zero_x_hat():
    rng = Rng(7)
    x = Tensor(rng.normal((1, 4, 8)))
    wq, wk, wv = (Tensor(rng.normal((8, 8))) for _ in range(3))
    out = memory_self_attention(x, Tensor(np.zeros((1, 4, 8))), wq, wk, wv, heads=2).data
    assert np.all(out == 0)


# -- degeneracy and accounting ---------------------------------------------------------------------

@pytest.mark.parametrize("layers", [3, 4])
def test_one_hot_routers_equal_baseline(layers):
    base = model(seed=3, layers=layers, layer_memory=False)
    mem = model(seed=3, layers=layers, layer_memory=True, router_mode="one_hot_last")
    np.testing.assert_allclose(forward(mem), forward(base), atol=1e-9, rtol=0)


def test_learned_router_at_init_is_near_baseline_not_equal():
    base = forward(model(seed=3, layer_memory=False))
    mem = forward(model(seed=3))
    assert 0 < np.abs(mem - base).max() < 1.0


@pytest.mark.parametrize("L,D", [(2, 8), (4, 8), (6, 12)])
def test_router_parameter_count(L, D):
    m = model(layers=L, dim=D, heads=2)
    closed_form = sum(D * l + l for l in range(2, L + 1))
    assert m.router_parameter_count() == closed_form
    base = model(layers=L, dim=D, heads=2, layer_memory=False)
    assert m.num_parameters() - base.num_parameters() == closed_form


def test_state_grows_one_per_layer():
    m = model()
    forward(m)
    assert len(m.last_state.reps) == CFG["layers"] + 1
    assert sorted(m.last_state.router_weights) == [2, 3, 4]


def test_config_validation():
    with pytest.raises(ValueError):
        DitConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        DitConfig(layers=1)
    with pytest.raises(ValueError):
        DitConfig(router_mode="random")
    DitConfig(layers=1, layer_memory=False)


# -- context and determinism -------------------------------------------------------------------------

def test_zero_init_cross_attention_contributes_nothing():
    m = model(zero_init_cross=True)
    a = forward(m, text=False)
    rng = Rng(1, 5)
    z = rng.normal((2, 3, 2, 2, 2))
    b = m(Tensor(z), np.array([0.3, 0.8]), np.zeros((2, 3, 5))).data
    np.testing.assert_array_equal(a, b)


def test_context_concatenation():
    t, i = np.ones((1, 2, 5)), np.zeros((1, 3, 5))
    assert context(t, i).shape == (1, 5, 5)
    assert context(None, None) is None
    assert context(t, None).shape == (1, 2, 5)


def test_forward_deterministic():
    np.testing.assert_array_equal(forward(model(seed=9)), forward(model(seed=9)))


def test_output_shape():
    assert forward(model()).shape == (2, 3, 2, 2, 2)


# -- tokens ----------------------------------------------------------------------------------------

def test_patchify_sequence_length():
    F, H, W = 120, 512, 512
    z = np.zeros((2, 1 + F // 4, H // 64, W // 64))
    assert patchify(Tensor(z)).shape == (1, G.sequence_length(F, H, W), 2) == (1, 1984, 2)


def test_patchify_round_trip():
    z = Rng(8).normal((2, 3, 4, 2, 3))
    np.testing.assert_array_equal(unpatchify(patchify(Tensor(z)), (4, 2, 3)).data, z)
    with pytest.raises(ValueError):
        unpatchify(patchify(Tensor(z)), (4, 2, 2))


def test_patchify_token_order():
    for t in range(2):
        for h in range(2):
            for w in range(2):
                z = np.zeros((1, 2, 2, 2))
                z[0, t, h, w] = 1.0
                tok = patchify(Tensor(z)).data[0, :, 0]
                assert np.flatnonzero(tok) == [(t * 2 + h) * 2 + w]


# -- heatmap -------------------------------------------------------------------------------------

def test_heatmap_uniform():
    L = 4
    m = model(layers=L, router_mode="uniform")
    forward(m)
    hm = router_heatmap(m.last_state, L)
    assert hm.shape == (L - 1, L)
    for l in range(2, L + 1):
        for j in range(L):
            assert hm[l - 2, j] == (1.0 / l if j < l else -1.0)


def test_heatmap_one_hot():
    m = model(router_mode="one_hot_last")
    forward(m)
    hm = router_heatmap(m.last_state, 4)
    for l in range(2, 5):
        assert hm[l - 2, l - 1] == 1.0
        assert np.all(hm[l - 2, :l - 1] == 0.0)
        assert np.all(hm[l - 2, l:] == -1.0)


def test_heatmap_learned_bounds():
    m = model()
    forward(m)
    hm = router_heatmap(m.last_state, 4)
    assert np.all(hm <= 1.0)
    for l in range(2, 5):
        assert np.all(hm[l - 2, :l] >= 0.0)


def test_heatmap_requires_weights():
    with pytest.raises(ValueError):
        router_heatmap(LayerMemoryState(), 4)
