"""Diffusion transformer with Layer Memory.

Each layer l >= 2 owns a router: a per-token linear map of the time-modulated
input X_{l-1} to l logits. Softmax over the layer axis mixes the stored
representations X_0..X_{l-1}; keys and values of the layer's self-attention
come from that mixture while queries keep coming from X_{l-1}.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Linear, Module, param
from .numerics import Rng, Tensor
from .numerics import tensor as T
from .numerics.ops import attention, layer_norm, merge_heads, softmax, split_heads

ROUTER_MODES = ("learned", "one_hot_last", "uniform")


@dataclass
class DitConfig:
    layers: int = 4
    dim: int = 32
    heads: int = 4
    in_channels: int = 4
    out_channels: int = 4
    ctx_dim: int = 16
    layer_memory: bool = True
    mlp_ratio: int = 2
    router_mode: str = "learned"
    router_bias: float = 5.0
    zero_init_cross: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.layer_memory and self.layers < 2:
            raise ValueError("layer memory needs at least 2 layers")
        if self.router_mode not in ROUTER_MODES:
            raise ValueError(f"router_mode must be one of {ROUTER_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TimeEmbedding:
    t_emb: Tensor
    sigma: np.ndarray


@dataclass
class LayerMemoryState:
    """Representations X_0.. of one forward pass and the router weights of each layer."""

    reps: list = field(default_factory=list)
    router_weights: dict = field(default_factory=dict)

    def append(self, x: Tensor) -> None:
        self.reps.append(x)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift with (B, D) shift/scale broadcast over tokens."""
    return x * (1.0 + T.expand_dims(scale, 1)) + T.expand_dims(shift, 1)


def memory_self_attention(x_prev: Tensor, x_hat: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                          heads: int = 1) -> Tensor:
    """Queries from ``x_prev``, keys and values from ``x_hat``; heads merged on return."""
    q = split_heads(x_prev @ wq, heads)
    k = split_heads(x_hat @ wk, heads)
    v = split_heads(x_hat @ wv, heads)
    return merge_heads(attention(q, k, v))


class Router(Module):
    def __init__(self, dim: int, n_reps: int, bias_last: float = 5.0):
        self.n_reps = n_reps
        self.weight = param(np.zeros((dim, n_reps)))
        b = np.zeros(n_reps)
        b[-1] = bias_last
        self.bias = param(b)

    def __call__(self, x_mod: Tensor) -> Tensor:
        return x_mod @ self.weight + self.bias


def route(state: LayerMemoryState, x_mod: Tensor, router: Router | None, layer: int,
          mode: str = "learned") -> Tensor:
    """Mix stored representations per token; returns X_hat.

    ``x_mod`` is X_{l-1} modulated by the time embedding. With fewer than two
    stored representations there is nothing to mix and X_{l-1} is returned.
    """
    reps = state.reps
    n = len(reps)
    if n < 2:
        return reps[-1]
    if router is not None and router.n_reps != n:
        raise ValueError(f"router expects {router.n_reps} representations, state has {n}")
    B, ntok, _ = x_mod.shape
    if mode == "learned":
        weights = softmax(router(x_mod), axis=-1)
    elif mode == "one_hot_last":
        w = np.zeros((B, ntok, n))
        w[..., -1] = 1.0
        weights = Tensor(w)
    elif mode == "uniform":
        weights = Tensor(np.full((B, ntok, n), 1.0 / n))
    else:
        raise ValueError(f"unknown router mode {mode!r}")
    state.router_weights[layer] = weights.data.copy()
    stacked = T.stack(reps, axis=2)  # (B, n_tok, n, D)
    return (T.expand_dims(weights, -1) * stacked).sum(axis=2)


class DitLayer(Module):
    def __init__(self, cfg: DitConfig, index: int, rng: Rng):
        D = cfg.dim
        r = rng.split(10)
        s = 1.0 / np.sqrt(D)
        self.index = index  # 1-based layer number l
        self.heads = cfg.heads
        self.mod = Linear(D, 6 * D, r[0], zero_init=True)
        self.wq = param(r[1].normal((D, D)) * s)
        self.wk = param(r[2].normal((D, D)) * s)
        self.wv = param(r[3].normal((D, D)) * s)
        self.wo = param(r[4].normal((D, D)) * s)
        self.cq = param(r[5].normal((D, D)) * s)
        self.ck = param(r[6].normal((cfg.ctx_dim, D)) / np.sqrt(cfg.ctx_dim))
        self.cv = param(r[7].normal((cfg.ctx_dim, D)) / np.sqrt(cfg.ctx_dim))
        self.co = param(np.zeros((D, D)) if cfg.zero_init_cross else r[8].normal((D, D)) * s)
        self.ff1 = Linear(D, cfg.mlp_ratio * D, r[9])
        self.ff2 = Linear(cfg.mlp_ratio * D, D, r[9].child(1))
        self.router = Router(D, index, cfg.router_bias) if cfg.layer_memory and index >= 2 else None

    def __call__(self, x_prev: Tensor, state: LayerMemoryState, t_emb: TimeEmbedding, ctx: Tensor | None,
                 router_mode: str = "learned") -> Tensor:
        D = x_prev.shape[-1]
        m = self.mod(T.silu(t_emb.t_emb))
        shift1, scale1, gate1 = m[:, 0:D], m[:, D:2 * D], m[:, 2 * D:3 * D]
        shift2, scale2, gate2 = m[:, 3 * D:4 * D], m[:, 4 * D:5 * D], m[:, 5 * D:6 * D]
        h = modulate(layer_norm(x_prev), shift1, scale1)
        if self.router is not None:
            x_hat = route(state, h, self.router, self.index, router_mode)
            kv = h if x_hat is x_prev else modulate(layer_norm(x_hat), shift1, scale1)
        else:
            kv = h
        a = memory_self_attention(h, kv, self.wq, self.wk, self.wv, self.heads) @ self.wo
        x = x_prev + T.expand_dims(1.0 + gate1, 1) * a
        if ctx is not None:
            x = x + self.cross_attention(layer_norm(x), ctx)
        f = self.ff2(T.gelu(self.ff1(modulate(layer_norm(x), shift2, scale2))))
        x = x + T.expand_dims(1.0 + gate2, 1) * f
        state.append(x)
        return x

    def cross_attention(self, xn: Tensor, ctx: Tensor) -> Tensor:
        q = split_heads(xn @ self.cq, self.heads)
        k = split_heads(ctx @ self.ck, self.heads)
        v = split_heads(ctx @ self.cv, self.heads)
        return merge_heads(attention(q, k, v)) @ self.co


def dit_layer(x_prev, state, t_emb, text_ctx, image_ctx, layer: DitLayer, router_mode: str = "learned"):
    ctx = context(text_ctx, image_ctx)
    return layer(x_prev, state, t_emb, ctx, router_mode)


def context(text_ctx, image_ctx) -> Tensor | None:
    parts = [T.as_tensor(c) for c in (text_ctx, image_ctx) if c is not None]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


# -- tokens --------------------------------------------------------------------------

def patchify(z, embed=None) -> Tensor:
    """(c, t, h, w) or (B, c, t, h, w) -> (B, t*h*w, D); token order is t-major, then h, then w."""
    z = T.as_tensor(getattr(z, "z", z))
    if z.ndim == 4:
        z = T.expand_dims(z, 0)
    B, c, t, h, w = z.shape
    tokens = z.reshape(B, c, t * h * w).transpose(0, 2, 1)
    return embed(tokens) if embed is not None else tokens


def unpatchify(tokens: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """Inverse of identity-embedded :func:`patchify`: (B, n, c) -> (B, c, t, h, w)."""
    t, h, w = grid
    B, n, c = tokens.shape
    if n != t * h * w:
        raise ValueError(f"{n} tokens do not fill a {grid} grid")
    return tokens.transpose(0, 2, 1).reshape(B, c, t, h, w)


def positional_code(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed sinusoidal code over (t, h, w), thirds of the width per axis."""
    t, h, w = grid
    coords = np.stack(np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij"), -1).reshape(-1, 3)
    per = dim // 3 // 2 * 2
    out = np.zeros((coords.shape[0], dim))
    for a in range(3):
        freqs = 1.0 / (10.0 ** (np.arange(per // 2) / max(per // 2, 1)))
        ang = coords[:, a:a + 1] * freqs
        out[:, a * per:a * per + per // 2] = np.sin(ang)
        out[:, a * per + per // 2:(a + 1) * per] = np.cos(ang)
    return out


def sigma_embedding(sigma, dim: int) -> np.ndarray:
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = 1000.0 * sigma[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class LayerMemoryDiT(Module):
    def __init__(self, cfg: DitConfig, rng: Rng):
        self.cfg = cfg
        r = rng.split(cfg.layers + 4)
        self.embed = Linear(cfg.in_channels, cfg.dim, r[0])
        self.t1 = Linear(cfg.dim, cfg.dim, r[1])
        self.t2 = Linear(cfg.dim, cfg.dim, r[2])
        self.layers = [DitLayer(cfg, i + 1, r[3 + i]) for i in range(cfg.layers)]
        self.final_mod = Linear(cfg.dim, 2 * cfg.dim, r[-1], zero_init=True)
        self.head = Linear(cfg.dim, cfg.out_channels, r[-1].child(1))
        self.last_state: LayerMemoryState | None = None

    def router_parameter_count(self) -> int:
        return int(sum(l.router.weight.size + l.router.bias.size for l in self.layers if l.router is not None))

    def time_embedding(self, sigma) -> TimeEmbedding:
        base = Tensor(sigma_embedding(sigma, self.cfg.dim))
        return TimeEmbedding(self.t2(T.silu(self.t1(base))), np.atleast_1d(sigma))

    def __call__(self, z, sigma, text_ctx=None, image_ctx=None) -> Tensor:
        """Velocity prediction for latents (B, c, t, h, w) at noise levels sigma (B,)."""
        z = T.as_tensor(z)
        B, c, t, h, w = z.shape
        x = patchify(z, self.embed) + positional_code((t, h, w), self.cfg.dim)
        temb = self.time_embedding(sigma)
        ctx = context(text_ctx, image_ctx)
        state = LayerMemoryState([x])
        for layer in self.layers:
            x = layer(x, state, temb, ctx, self.cfg.router_mode)
        self.last_state = state
        D = self.cfg.dim
        m = self.final_mod(T.silu(temb.t_emb))
        out = self.head(modulate(layer_norm(x), m[:, :D], m[:, D:]))
        return unpatchify(out, (t, h, w))


def router_heatmap(state: LayerMemoryState, n_layers: int) -> np.ndarray:
    """(L-1) x L matrix; row l-2 holds, for each representation j < l, the max router weight.

    Entries with j >= l are -1.
    """
    if not state.router_weights:
        raise ValueError("no router weights recorded; run a forward pass with layer memory on")
    out = -np.ones((n_layers - 1, n_layers))
    for l in range(2, n_layers + 1):
        w = state.router_weights.get(l)
        if w is None:
            continue
        out[l - 2, :l] = w.reshape(-1, l).max(axis=0)
    return out
