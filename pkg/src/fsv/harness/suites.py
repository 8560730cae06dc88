"""Self-check suites shared by the CLI and the test-suite.

``grad_suite`` finite-difference checks every differentiable building block;
``flow_identity_suite`` measures the residuals of the flow-matching algebra.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from ..autoencoder import (ConvMode, FirstFrameCrossAttention, ResBlock, conv3d_mode, hw_attention, pixel_norm,
                           time_spatial_shuffle)
from ..dit import DitConfig, DitLayer, LayerMemoryDiT, LayerMemoryState, Router, TimeEmbedding, memory_self_attention, route
from ..flow import deviation_estimate, make_flow_sample, pseudo_huber, z0_tilde_ratio_form
from ..numerics import Rng, Tensor, grad_check
from ..numerics import tensor as T
from ..upsampler import LatentUpsampler, UpsamplerConfig, bicubic_down
from ..vf_align import align_dims, v_mcos, v_mdms

GRAD_TOL = 1e-5


def _probe(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar sum(out * w); random w keeps every output coordinate in play."""
    return (out * w).sum()


def _bind(module, names, tensors) -> None:
    for name, t in zip(names, tensors):
        obj = module
        *path, last = name.split(".")
        for p in path:
            obj = obj[int(p)] if isinstance(obj, (list, tuple)) else getattr(obj, p)
        setattr(obj, last, t)


def _module_case(module, rng: Rng, x_shape, call, wrt_names):
    """Randomize every parameter, then check gradients w.r.t. the input and ``wrt_names``."""
    names = [n for n, _ in module.named_parameters()]
    for n, p in module.named_parameters():
        _bind(module, [n], [Tensor(rng.normal(p.shape) * 0.4, requires_grad=True)])
    values = dict(module.named_parameters())
    x = rng.normal(x_shape)
    probe = None

    def fn(x, *ws):
        nonlocal probe
        _bind(module, wrt_names, ws)
        out = call(module, x)
        if probe is None:
            probe = Rng(1, 99).normal(out.shape)
        return _probe(out, probe)

    assert all(n in names for n in wrt_names)
    return fn, [x] + [values[n].data.copy() for n in wrt_names]


def _conv_case(kind):
    def make(rng):
        mode = ConvMode.parse(kind)
        w = rng.normal((2, 2, 3, 3, 3)) * 0.3
        probe = rng.normal((2, 4, 3, 3))
        return (lambda x, w, b: _probe(conv3d_mode(x, w, b, mode), probe)), [rng.normal((2, 4, 3, 3)), w,
                                                                               rng.normal(2)]
    return make


def _pixel_norm(rng):
    probe = rng.normal((3, 2, 2, 2))
    return (lambda x: _probe(pixel_norm(x), probe)), [rng.normal((3, 2, 2, 2))]


def _shuffle(rng):
    probe = rng.normal((16, 1, 1, 2))
    return (lambda x: _probe(time_spatial_shuffle(x, (2, 2, 2), "down"), probe)), [rng.normal((2, 2, 2, 4))]


def _hw_attention(rng):
    probe = rng.normal((4, 2, 2, 2))
    names = ("wq", "wk", "wv", "wo")

    def fn(x, *ws):
        return _probe(hw_attention(x, SimpleNamespace(heads=2, **dict(zip(names, ws)))), probe)
    return fn, [rng.normal((4, 2, 2, 2))] + [rng.normal((4, 4)) * 0.5 for _ in names]


def _cross_attention(rng):
    m = FirstFrameCrossAttention(3, 2, rng.child(0), width=4)
    feat = rng.normal((2, 1, 2, 2))
    return _module_case(m, rng, (3, 2, 2, 2), lambda mod, x: mod(x, Tensor(feat)), ["wq", "wk", "wo"])


def _resblock(rng):
    m = ResBlock(2, rng.child(0), ConvMode("causal"))
    return _module_case(m, rng, (2, 3, 2, 2), lambda mod, x: mod(x), ["conv1.conv.weight", "conv2.conv.bias"])


def _router(rng):
    r = Router(4, 3)
    reps = [rng.normal((1, 3, 4)) for _ in range(3)]
    probe = rng.normal((1, 3, 4))

    def fn(x_mod, w, b, r0, r1, r2):
        r.weight, r.bias = w, b
        state = LayerMemoryState([r0, r1, r2])
        return _probe(route(state, x_mod, r, 3, "learned"), probe)
    return fn, [rng.normal((1, 3, 4)), rng.normal((4, 3)), rng.normal(3)] + reps


def _memory_attention(rng):
    probe = rng.normal((1, 3, 4))
    return ((lambda xp, xh, wq, wk, wv: _probe(memory_self_attention(xp, xh, wq, wk, wv, heads=2), probe)),
            [rng.normal((1, 3, 4)), rng.normal((1, 3, 4))] + [rng.normal((4, 4)) * 0.5 for _ in range(3)])


def _router_attention(rng):
    """Router and memory attention jointly: B=1, n=4 tokens, D=8, layer l=3."""
    cfg = DitConfig(layers=3, dim=8, heads=2, ctx_dim=3)
    layer = DitLayer(cfg, 3, rng.child(0))
    prev = [Tensor(rng.normal((1, 4, 8))) for _ in range(2)]
    temb = TimeEmbedding(Tensor(rng.normal((1, 8))), np.array([0.3]))

    def call(mod, x):
        return mod(x, LayerMemoryState(prev + [x]), temb, None)
    return _module_case(layer, rng, (1, 4, 8), call, ["mod.weight", "router.weight", "router.bias", "wk", "wv"])


def _dit_model(rng):
    cfg = DitConfig(layers=3, dim=6, heads=2, in_channels=2, out_channels=2, ctx_dim=3)
    model = LayerMemoryDiT(cfg, rng.child(0))
    text = Tensor(rng.normal((1, 2, 3)))

    def call(mod, z):
        return mod(z, np.array([0.4]), text)
    return _module_case(model, rng, (1, 2, 2, 2, 1), call,
                        ["embed.weight", "layers.2.router.weight", "layers.1.cv", "head.weight"])


def _vf_pair(rng, z, W, f):
    return align_dims(z, Tensor(f), W, pool_kernel=2, m1=0.1, m2=0.1)


def _v_mcos(rng):
    f = rng.normal((3, 3, 2, 2))
    return (lambda z, W: v_mcos(_vf_pair(rng, z, W, f))), [rng.normal((2, 2, 2, 2)), rng.normal((3, 2))]


def _v_mdms(rng):
    f = rng.normal((3, 3, 2, 2))
    return (lambda z, W: v_mdms(_vf_pair(rng, z, W, f))), [rng.normal((2, 2, 2, 2)), rng.normal((3, 2))]


def _v_mdms_sampled(rng):
    f = rng.normal((3, 3, 2, 2))
    seed = int(rng.integers(0, 1000))
    return ((lambda z, W: v_mdms(_vf_pair(rng, z, W, f), n_pairs=20, rng=Rng(seed, 5))),
            [rng.normal((2, 2, 2, 2)), rng.normal((3, 2))])


def _pseudo_huber(rng):
    target = rng.normal((3, 4))
    return (lambda p: pseudo_huber(p, target, 0.03)), [rng.normal((3, 4)) * 0.1]


def _upsampler(rng):
    m = LatentUpsampler(UpsamplerConfig(2, width=3, n_res_blocks=2), rng.child(0))
    return _module_case(m, rng, (2, 2, 2, 2), lambda mod, x: mod(x),
                        ["proj.conv.weight", "blocks.0.conv1.conv.weight", "blocks.1.conv2.conv.weight"])


def _bicubic(rng):
    probe = rng.normal((2, 1, 2, 3))
    return (lambda v: _probe(bicubic_down(v), probe)), [rng.normal((2, 1, 4, 6))]


GRAD_CASES = {
    "pixel_norm": _pixel_norm,
    "conv_causal": _conv_case("causal"),
    "conv_non_causal": _conv_case("non_causal"),
    "conv_group_causal_1": _conv_case("group_causal:1"),
    "conv_group_causal_2": _conv_case("group_causal:2"),
    "conv_group_causal_4": _conv_case("group_causal:4"),
    "time_spatial_shuffle": _shuffle,
    "hw_attention": _hw_attention,
    "first_frame_cross_attention": _cross_attention,
    "ae_resblock": _resblock,
    "router": _router,
    "memory_self_attention": _memory_attention,
    "router_attention": _router_attention,
    "dit_model": _dit_model,
    "v_mcos": _v_mcos,
    "v_mdms": _v_mdms,
    "v_mdms_sampled": _v_mdms_sampled,
    "pseudo_huber": _pseudo_huber,
    "upsampler_stack": _upsampler,
    "bicubic_down": _bicubic,
}


@dataclass
class GradResult:
    name: str
    seed: int
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err < GRAD_TOL


def grad_suite(seeds=(0, 1, 2), names=None) -> list[GradResult]:
    out = []
    for name in names or GRAD_CASES:
        for seed in seeds:
            fn, point = GRAD_CASES[name](Rng(seed, 77))
            out.append(GradResult(name, seed, grad_check(fn, point)))
    return out


def flow_identity_suite(trials: int = 100, seed: int = 0, shape=(2, 3, 4, 4)) -> dict:
    """Max residuals of the interpolation, velocity and deviation identities over random instances."""
    rng = Rng(seed, 88)
    worst = dict.fromkeys(("z_sigma", "v_target", "z0_hat", "eps_hat", "z0_tilde_chain", "z0_tilde_ratio"), 0.0)
    for _ in range(trials):
        z0 = rng.normal(shape)
        sigma = float(rng.uniform((), 0.01, 0.99))
        s = make_flow_sample(z0, rng, sigma=sigma)
        v_hat = rng.normal(shape)
        e = deviation_estimate(s, v_hat)
        res = {
            "z_sigma": s.z_sigma - ((1 - sigma) * s.z0 + sigma * s.eps),
            "v_target": s.v_target - (s.eps - s.z0),
            "z0_hat": e.z0_hat - (s.z_sigma - sigma * v_hat),
            "eps_hat": e.eps_hat - (v_hat + e.z0_hat),
            "z0_tilde_chain": e.z0_tilde - (e.z0_hat + (s.eps - e.eps_hat)),
            "z0_tilde_ratio": e.z0_tilde - z0_tilde_ratio_form(e, s),
        }
        for k, r in res.items():
            worst[k] = max(worst[k], float(np.abs(r).max()))
    return worst
