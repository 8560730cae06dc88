import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsv.dit import DitConfig, LayerMemoryDiT
from fsv.flow import (ConditionPack, FlowConfig, RefinerConfig, assemble_refiner_input, build_refiner_pack,
                      condition_dropout, deviation_estimate, dynamic_mask, frame_shuffle, logistic,
                      make_flow_sample, normalize_error, pseudo_huber, random_frame_replace, sample_sigma,
                      train_step, upsampling_error, z0_tilde_ratio_form)
from fsv.harness.suites import flow_identity_suite
from fsv.nn import AdamW
from fsv.numerics import Rng, Tensor


# -- sigma sampling --------------------------------------------------------------------------

def test_logistic_zero():
    assert logistic(0.0) == 0.5


def test_sigma_median():
    s = sample_sigma(Rng(0), size=100000)
    assert abs(np.median(s) - 0.5) < 0.01
    assert np.all((s > 0) & (s < 1))


def test_sigma_median_shifted():
    s = sample_sigma(Rng(1), loc=2.0, size=100000)
    assert abs(np.median(s) - 1 / (1 + np.exp(-2.0))) < 0.01
    assert abs(np.median(s) - 0.8808) < 0.01


def test_sigma_scale_must_be_positive():
    with pytest.raises(ValueError):
        sample_sigma(Rng(0), scale=0.0)


# -- flow sample -----------------------------------------------------------------------------

def test_flow_sample_endpoints():
    z0 = Rng(2).normal((2, 3, 2, 2))
    s0 = make_flow_sample(z0, Rng(3), sigma=0.0)
    np.testing.assert_array_equal(s0.z_sigma, z0)
    s1 = make_flow_sample(z0, Rng(3), sigma=1.0)
    np.testing.assert_array_equal(s1.z_sigma, s1.eps)


def test_flow_sample_invariants():
    z0 = Rng(4).normal((2, 3, 2, 2))
    s = make_flow_sample(z0, Rng(5))
    assert np.abs(s.z_sigma - ((1 - s.sigma) * z0 + s.sigma * s.eps)).max() < 1e-15
    assert np.abs(s.v_target - (s.eps - z0)).max() < 1e-15


def test_batched_sigma_per_sample():
    z0 = Rng(6).normal((3, 2, 1, 2, 2))
    s = make_flow_sample(z0, Rng(7), batched=True)
    assert s.sigma.shape == (3,)
    for b in range(3):
        np.testing.assert_allclose(s.z_sigma[b], (1 - s.sigma[b]) * z0[b] + s.sigma[b] * s.eps[b], atol=1e-15)


# -- pseudo-Huber ------------------------------------------------------------------------------

def test_pseudo_huber_zero():
    x = Rng(8).normal((3, 4))
    assert float(pseudo_huber(x, x).data) == 0.0


def test_pseudo_huber_asymptote():
    assert abs(float(pseudo_huber(np.array([100.0]), np.array([0.0]), 0.03).data) - 99.97) < 1e-4


def test_pseudo_huber_quadratic_regime():
    r, c = 1e-4, 0.03
    got = float(pseudo_huber(np.array([r]), np.array([0.0]), c).data)
    assert abs(got - r * r / (2 * c)) / (r * r / (2 * c)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_pseudo_huber_gradient_bounded(seed):
    p = Tensor(Rng(seed).normal((5,)) * 10, requires_grad=True)
    loss = pseudo_huber(p, np.zeros(5)) * 5.0  # undo the mean
    loss.backward()
    assert np.all(np.abs(p.grad) <= 1.0)
    assert float(loss.data) >= 0


def test_pseudo_huber_rejects_bad_c():
    with pytest.raises(ValueError):
        pseudo_huber(np.zeros(2), np.zeros(2), 0.0)


# -- deviation estimate ---------------------------------------------------------------------

def test_perfect_prediction():
    z0 = Rng(9).normal((2, 2, 2, 2))
    s = make_flow_sample(z0, Rng(10), sigma=0.4)
    e = deviation_estimate(s, s.eps - z0)
    np.testing.assert_allclose(e.z0_hat, z0, atol=1e-15)
    np.testing.assert_allclose(e.z0_tilde, z0, atol=1e-15)


def test_velocity_equal_to_noise():
    z0 = Rng(11).normal((2, 2, 2, 2))
    s = make_flow_sample(z0, Rng(12), sigma=0.3)
    e = deviation_estimate(s, s.eps)
    np.testing.assert_array_equal(e.z0_tilde, 0.0)
    np.testing.assert_allclose(e.z0_hat, 0.7 * z0, atol=1e-15)
    np.testing.assert_allclose(z0_tilde_ratio_form(e, s), 0.0, atol=1e-14)


def test_identity_suite_residuals():
    res = flow_identity_suite(trials=100, seed=0)
    assert max(res.values()) < 1e-12


def test_ratio_form_needs_positive_sigma():
    s = make_flow_sample(np.zeros((1, 1, 1, 1)), Rng(0), sigma=0.0)
    with pytest.raises(ValueError):
        z0_tilde_ratio_form(deviation_estimate(s, np.zeros((1, 1, 1, 1))), s)


# -- dynamic mask ---------------------------------------------------------------------------

def test_normalize_error_example():
    np.testing.assert_allclose(normalize_error([0.0, 0.5, 1.0], 0.2, 0.8), [0.2, 0.5, 0.8], atol=1e-15)


def test_normalize_constant_maps_to_midpoint():
    np.testing.assert_array_equal(normalize_error([0.3, 0.3]), [0.5, 0.5])


def test_normalize_zero_error_location_maps_to_lo():
    assert normalize_error([0.0, 2.0, 1.0], 0.1, 0.9)[0] == 0.1


def test_normalize_range_validation():
    with pytest.raises(ValueError):
        normalize_error([0, 1], 0.8, 0.2)


def test_dynamic_mask_frames():
    z = np.zeros((2, 3, 2, 2))
    z_up = z + np.array([0.0, 0.5, 1.0])[None, :, None, None]
    np.testing.assert_allclose(dynamic_mask(z, z_up), [1.0, 0.2, 0.5, 0.8], atol=1e-15)


def test_dynamic_mask_first_frame_always_one():
    rng = Rng(13)
    z, z_up = rng.normal((2, 4, 2, 2)), rng.normal((2, 4, 2, 2))
    for g in ("frame", "location"):
        m = dynamic_mask(z, z_up, granularity=g)
        assert np.all(m[0] == 1.0)
        assert np.all((m[1:] >= 0.2) & (m[1:] <= 0.8))


def test_dynamic_mask_broadcast_to_clip():
    z = Rng(14).normal((2, 1, 2, 2))
    m = dynamic_mask(z, z * 1.1, n_frames=5)
    np.testing.assert_array_equal(m, [1.0, 0.5, 0.5, 0.5, 0.5])


def test_upsampling_error_granularity():
    z = np.zeros((2, 2, 1, 2))
    up = np.ones((2, 2, 1, 2))
    assert upsampling_error(z, up).shape == (2,)
    assert upsampling_error(z, up, "location").shape == (2, 1, 2)
    with pytest.raises(ValueError):
        upsampling_error(z, up, "pixel")
    with pytest.raises(ValueError):
        upsampling_error(z, up[:, :1])


# -- frame shuffle --------------------------------------------------------------------------

def test_shuffle_probability_zero_is_identity():
    x = Rng(15).normal((2, 5, 1, 1))
    for s in range(20):
        y, cat = frame_shuffle(x, Rng(s), p_apply=0.0)
        assert cat is None
        np.testing.assert_array_equal(y, x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 8))
def test_shuffle_is_permutation(seed, t):
    x = np.arange(t, dtype=float).reshape(1, t, 1, 1)
    y, cat = frame_shuffle(x, Rng(seed), p_apply=1.0)
    assert sorted(y.ravel()) == list(range(t))
    if cat == "adjacent":
        moved = np.flatnonzero(y.ravel() != x.ravel())
        assert len(moved) == 2 and moved[1] - moved[0] == 1
    if cat == "nonadjacent":
        moved = np.flatnonzero(y.ravel() != x.ravel())
        assert len(moved) == 2 and moved[1] - moved[0] >= 2


def test_shuffle_statistics():
    x = np.zeros((1, 5, 1, 1))
    rng = Rng(16)
    counts = {None: 0, "adjacent": 0, "nonadjacent": 0, "permute": 0}
    n = 100000
    for i in range(n):
        counts[frame_shuffle(x, rng.child(i))[1]] += 1
    applied = n - counts[None]
    assert abs(applied / n - 0.5) < 0.005
    for cat, p in (("adjacent", 0.6), ("nonadjacent", 0.3), ("permute", 0.1)):
        assert abs(counts[cat] / applied - p) < 0.01


def test_shuffle_two_frames_never_nonadjacent():
    x = np.zeros((1, 2, 1, 1))
    cats = {frame_shuffle(x, Rng(s), p_apply=1.0)[1] for s in range(300)}
    assert "nonadjacent" not in cats and "adjacent" in cats


# -- dropout, replacement, layout -----------------------------------------------------------

def pack(t=4, c=2):
    rng = Rng(17)
    mask = np.full(t, 0.5)
    mask[0] = 1.0
    return ConditionPack(rng.normal((c, t, 2, 2)), rng.normal((c, t, 2, 2)), mask)


def test_dropout_zero_is_identity():
    p = pack()
    for s in range(50):
        q, dropped = condition_dropout(p, Rng(s), 0.0)
        assert q is p and not dropped


def test_dropout_one_zeroes_all_but_first():
    p = pack()
    q, dropped = condition_dropout(p, Rng(0), 1.0)
    assert dropped
    np.testing.assert_array_equal(q.condition[:, 0], p.condition[:, 0])
    assert np.all(q.condition[:, 1:] == 0) and np.all(q.mask[1:] == 0) and q.mask[0] == 1


def test_dropout_rate():
    p = pack()
    rng = Rng(18)
    n = 10000
    hits = sum(condition_dropout(p, rng.child(i), 0.1)[1] for i in range(n))
    assert abs(hits / n - 0.1) < 0.01


def test_pack_validation():
    with pytest.raises(ValueError):
        ConditionPack(np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 1, 1)), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        ConditionPack(np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 1, 1)), np.array([1.0, 1.5]))


def test_frame_replace():
    p = pack(t=40)
    real = np.full_like(p.condition, 9.0)
    q = random_frame_replace(p, real, Rng(19), 0.5)
    hit = q.mask == 1.0
    assert hit[0] and 5 < hit[1:].sum() < 35
    assert np.all(q.condition[:, 1:][:, hit[1:]] == 9.0)
    np.testing.assert_array_equal(q.condition[:, 0], p.condition[:, 0])
    assert random_frame_replace(p, real, Rng(0), 0.0) is p


def test_layout_image_to_video():
    rng = Rng(20)
    noise, first = rng.normal((3, 4, 2, 2)), rng.normal((3, 1, 2, 2))
    x = assemble_refiner_input(noise, first)
    assert x.shape == (7, 4, 2, 2)
    np.testing.assert_array_equal(x[:3], noise)
    np.testing.assert_array_equal(x[3:6, 0], first[:, 0])
    assert np.all(x[3:6, 1:] == 0)
    np.testing.assert_array_equal(x[6, :, 0, 0], [1, 0, 0, 0])


def test_layout_inference_mode():
    rng = Rng(21)
    noise, first, low = rng.normal((3, 4, 2, 2)), rng.normal((3, 1, 2, 2)), rng.normal((3, 4, 2, 2))
    mask = dynamic_mask(low[:, :1], low[:, :1] + 0.1, n_frames=4)
    x = assemble_refiner_input(noise, first, low, mask)
    np.testing.assert_array_equal(x[3:6, 1:], low[:, 1:])
    np.testing.assert_array_equal(x[6, :, 1, 1], mask)
    loc_mask = np.ones((4, 2, 2))
    assert assemble_refiner_input(noise, first, low, loc_mask).shape == (7, 4, 2, 2)


def test_layout_errors():
    noise = np.zeros((3, 4, 2, 2))
    with pytest.raises(ValueError):
        assemble_refiner_input(noise, np.zeros((2, 1, 2, 2)))
    with pytest.raises(ValueError):
        assemble_refiner_input(noise, np.zeros((3, 1, 2, 2)), np.zeros((3, 3, 2, 2)))
    with pytest.raises(ValueError):
        assemble_refiner_input(noise, np.zeros((3, 1, 2, 2)), None, np.zeros(3))


def test_build_refiner_pack():
    rng = Rng(22)
    noise, real = rng.normal((2, 5, 2, 2)), rng.normal((2, 5, 2, 2))
    low = real + 0.1 * rng.normal((2, 5, 2, 2))
    pair = (real[:, :1], low[:, :1])
    x, p = build_refiner_pack(noise, real[:, :1], low, pair, real, Rng(3))
    assert x.shape == (5, 5, 2, 2)
    assert p.mask[0] == 1 and np.all((p.mask >= 0) & (p.mask <= 1))
    x2, _ = build_refiner_pack(noise, real[:, :1], low, pair, real, Rng(3))
    np.testing.assert_array_equal(x, x2)
    quiet = RefinerConfig(p_shuffle=0.0, p_drop=0.0, p_replace=0.0)
    x3, _ = build_refiner_pack(noise, real[:, :1], low, pair, real, Rng(3), quiet)
    np.testing.assert_array_equal(x3[2:4, 1:], low[:, 1:])


# -- training step --------------------------------------------------------------------------

def tiny_dit(seed=0):
    return LayerMemoryDiT(DitConfig(layers=2, dim=8, heads=2, in_channels=2, out_channels=2, ctx_dim=4), Rng(seed))


def test_train_step_reproducible():
    z0 = Rng(23).normal((2, 2, 2, 2, 2))
    losses = []
    for _ in range(2):
        m = tiny_dit()
        opt = AdamW(m.parameters(), lr=1e-3)
        losses.append([train_step(m, opt, z0, Rng(1, s), FlowConfig()) for s in range(3)])
    assert abs(losses[0][0] - losses[1][0]) < 1e-12
    assert losses[0] == losses[1]


def test_train_step_updates_parameters():
    m = tiny_dit()
    before = m.head.weight.data.copy()
    train_step(m, AdamW(m.parameters(), lr=1e-2), Rng(24).normal((1, 2, 2, 2, 2)), Rng(0))
    assert np.abs(m.head.weight.data - before).max() > 0
