"""Toy-scale deep-compression video autoencoder.

All tensors are unbatched ``(c, t, h, w)``. Encoder convolutions are causal in
time so a clip can be encoded in temporal chunks with per-layer frame caches
(:class:`StreamCache`); the decoder may use causal, group-causal or
non-causal convolutions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import CompressionSpec
from .nn import Conv3d, Module, param
from .numerics import Rng, Tensor
from .numerics import tensor as T
from .numerics.ops import attention, conv3d, merge_heads, replicate_pad_axis, split_heads

CONV_KINDS = ("causal", "group_causal", "non_causal")


@dataclass(frozen=True)
class ConvMode:
    kind: str = "causal"
    group_size: int = 1

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if self.kind == "group_causal" and self.group_size not in (1, 2, 4):
            raise ValueError("group_size must be 1, 2 or 4")

    @classmethod
    def parse(cls, text: str) -> "ConvMode":
        """``causal``, ``non_causal`` or ``group_causal:<g>``."""
        if text.startswith("group_causal"):
            _, _, g = text.partition(":")
            return cls("group_causal", int(g or 1))
        return cls(text)


class StreamCache(dict):
    """Per-layer state carried between temporal chunks of one clip."""


@dataclass
class LatentVideo:
    z: Tensor
    spec: CompressionSpec
    causal: bool = True

    @property
    def shape(self):
        return self.z.shape


# -- temporal convolution modes ---------------------------------------------------------

def frame_groups(n_frames: int, group_size: int) -> list[tuple[int, int]]:
    """Consecutive [start, end) frame groups.

    Plain groups when ``n_frames`` divides evenly; otherwise frame 0 forms its
    own group (the causal first frame) and the rest must divide.
    """
    if n_frames % group_size == 0:
        starts = list(range(0, n_frames, group_size))
    elif (n_frames - 1) % group_size == 0:
        starts = [0] + list(range(1, n_frames, group_size))
    else:
        raise ValueError(f"{n_frames} frames cannot be split into groups of {group_size}")
    ends = starts[1:] + [n_frames]
    return list(zip(starts, ends))


def conv3d_mode(x: Tensor, weight: Tensor, bias: Tensor | None, mode: ConvMode,
                cache: StreamCache | None = None, key=None) -> Tensor:
    """Same-size 3D convolution with the temporal padding policy of ``mode``.

    Spatial borders are zero padded symmetrically. Temporal layouts:
    causal pads kt-1 replicas of the first frame in front (or the cached tail
    of the previous chunk); non_causal replicates both ends; group_causal lets
    each group see past frames plus its own, with the group's last frame
    replicated in place of any future frame.
    """
    kt, kh, kw = weight.shape[2:]
    if kt % 2 == 0:
        raise ValueError("temporal kernel extent must be odd")
    x = T.pad(x, [(0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)]) if kh > 1 or kw > 1 else x
    if mode.kind == "causal":
        if kt == 1:
            return conv3d(x, weight, bias)
        if cache is not None and key in cache:
            ext = T.concat([cache[key], x], axis=1)
        else:
            ext = replicate_pad_axis(x, 1, kt - 1, 0)
        if cache is not None:
            cache[key] = Tensor(ext.data[:, -(kt - 1):])
        return conv3d(ext, weight, bias)
    half = kt // 2
    if mode.kind == "non_causal":
        return conv3d(replicate_pad_axis(x, 1, half, half), weight, bias)
    outs = []
    for s, e in frame_groups(x.shape[1], mode.group_size):
        idx = np.concatenate([np.clip(np.arange(s - half, e), 0, None), np.full(half, e - 1)])
        outs.append(conv3d(T.take(x, idx, axis=1), weight, bias))
    return T.concat(outs, axis=1)


class VideoConv(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, kernel=(3, 3, 3), mode: ConvMode = ConvMode(),
                 zero_init: bool = False):
        self.conv = Conv3d(c_in, c_out, kernel, rng, zero_init=zero_init)
        self.mode = mode

    def __call__(self, x: Tensor, cache: StreamCache | None = None) -> Tensor:
        return conv3d_mode(x, self.conv.weight, self.conv.bias, self.mode, cache, key=id(self))


# -- per-location ops ------------------------------------------------------------------

def pixel_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each location's channel vector to unit root-mean-square."""
    return x / T.sqrt((x * x).mean(axis=0, keepdims=True) + eps)


def noise_inject(x: Tensor, rng: Rng | None, weight: float = 0.05) -> Tensor:
    if weight < 0:
        raise ValueError("noise weight must be >= 0")
    if rng is None or weight == 0:
        return x
    return x + weight * rng.normal(x.shape)


def time_spatial_shuffle(x: Tensor, factors: Sequence[int], direction: str) -> Tensor:
    """Move (ft, fh, fw) blocks between time/space and channels.

    Down: (c, t, h, w) -> (c*ft*fh*fw, t/ft, h/fh, w/fw) with output channel
    ((c_in*ft + dt)*fh + dh)*fw + dw. Up is the exact inverse.
    """
    ft, fh, fw = factors
    c, t, h, w = x.shape
    if direction == "down":
        if t % ft or h % fh or w % fw:
            raise ValueError(f"shape {x.shape} not divisible by factors {tuple(factors)}")
        y = x.reshape(c, t // ft, ft, h // fh, fh, w // fw, fw)
        y = y.transpose(0, 2, 4, 6, 1, 3, 5)
        return y.reshape(c * ft * fh * fw, t // ft, h // fh, w // fw)
    if direction == "up":
        k = ft * fh * fw
        if c % k:
            raise ValueError(f"channels {c} not divisible by {k}")
        y = x.reshape(c // k, ft, fh, fw, t, h, w)
        y = y.transpose(0, 4, 1, 5, 2, 6, 3)
        return y.reshape(c // k, t * ft, h * fh, w * fw)
    raise ValueError(f"direction must be 'down' or 'up', not {direction!r}")


class HWAttention(Module):
    """Self-attention over the h*w tokens of each frame separately."""

    def __init__(self, channels: int, rng: Rng, heads: int = 1):
        s = 1.0 / np.sqrt(channels)
        self.heads = heads
        self.wq = param(rng.normal((channels, channels)) * s)
        self.wk = param(rng.normal((channels, channels)) * s)
        self.wv = param(rng.normal((channels, channels)) * s)
        self.wo = param(rng.normal((channels, channels)) * s)

    def __call__(self, x: Tensor) -> Tensor:
        return hw_attention(x, self)


def hw_attention(x: Tensor, params) -> Tensor:
    """Output projection of per-frame attention; no residual."""
    c, t, h, w = x.shape
    tok = x.reshape(c, t, h * w).transpose(1, 2, 0)  # (t, hw, c)
    q = split_heads(tok @ params.wq, params.heads)
    k = split_heads(tok @ params.wk, params.heads)
    v = split_heads(tok @ params.wv, params.heads)
    out = merge_heads(attention(q, k, v)) @ params.wo
    return out.transpose(2, 0, 1).reshape(c, t, h, w)


class FirstFrameCrossAttention(Module):
    """Decoder tokens attend to one encoder feature map; output projection starts at zero."""

    def __init__(self, c_query: int, c_feat: int, rng: Rng, width: int | None = None):
        width = width or c_query
        self.wq = param(rng.normal((c_query, width)) / np.sqrt(c_query))
        self.wk = param(rng.normal((c_feat, width)) / np.sqrt(c_feat))
        self.wv = param(rng.normal((c_feat, width)) / np.sqrt(c_feat))
        self.wo = param(np.zeros((width, c_query)))

    def __call__(self, x: Tensor, feat: Tensor) -> Tensor:
        c, t, h, w = x.shape
        q = pixel_norm(x).reshape(c, t * h * w).T @ self.wq
        cf = feat.shape[0]
        kv = feat.reshape(cf, -1).T
        out = attention(q, kv @ self.wk, kv @ self.wv) @ self.wo
        return out.T.reshape(c, t, h, w)


class ResBlock(Module):
    def __init__(self, channels: int, rng: Rng, mode: ConvMode, noise_weight: float = 0.0):
        self.conv1 = VideoConv(channels, channels, rng, mode=mode)
        self.conv2 = VideoConv(channels, channels, rng, mode=mode)
        self.noise_weight = noise_weight

    def __call__(self, x: Tensor, cache=None, rng: Rng | None = None) -> Tensor:
        h = self.conv1(T.silu(pixel_norm(x)), cache)
        h = noise_inject(h, rng, self.noise_weight)
        h = self.conv2(T.silu(pixel_norm(h)), cache)
        h = noise_inject(h, rng, self.noise_weight)
        return x + h


class Downsample(Module):
    """Time-spatial-to-channel shuffle followed by a 1x1x1 channel map."""

    def __init__(self, c_in: int, c_out: int, factors, rng: Rng, causal: bool = True):
        self.factors = tuple(factors)
        self.causal = causal
        self.proj = Conv3d(c_in * int(np.prod(self.factors)), c_out, 1, rng)

    def __call__(self, x: Tensor, cache=None) -> Tensor:
        ft = self.factors[0]
        if self.causal and ft > 1:
            started = cache is not None and cache.get(id(self), False)
            if not started:
                x = replicate_pad_axis(x, 1, ft - 1, 0)
            if cache is not None:
                cache[id(self)] = True
        return self.proj(time_spatial_shuffle(x, self.factors, "down"))


class Upsample(Module):
    """1x1x1 channel map followed by channel-to-time-spatial shuffle."""

    def __init__(self, c_in: int, c_out: int, factors, rng: Rng, causal: bool = True):
        self.factors = tuple(factors)
        self.causal = causal
        self.proj = Conv3d(c_in, c_out * int(np.prod(self.factors)), 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = time_spatial_shuffle(self.proj(x), self.factors, "up")
        ft = self.factors[0]
        if self.causal and ft > 1:
            y = y[:, ft - 1:]
        return y


# -- configuration and assemblies ------------------------------------------------------

@dataclass
class AEConfig:
    in_channels: int = 3
    latent_channels: int = 16
    stem_channels: int = 8
    block_channels: tuple = (16, 16, 16)
    block_factors: tuple = ((1, 2, 2), (2, 2, 2), (2, 2, 2))
    attention: tuple = (False, True, True)
    heads: int = 1
    causal: bool = True
    decoder_modes: tuple = ("non_causal", "non_causal", "non_causal")
    decoder_channels: tuple | None = None
    inject_blocks: int = 2
    noise_weight: float = 0.05

    def __post_init__(self):
        n = len(self.block_channels)
        if not (len(self.block_factors) == len(self.attention) == len(self.decoder_modes) == n):
            raise ValueError("per-block config lists must have equal length")
        if not 0 <= self.inject_blocks <= n:
            raise ValueError("inject_blocks must lie in [0, number of blocks]")
        self.block_factors = tuple(tuple(f) for f in self.block_factors)

    @property
    def factors(self) -> tuple[int, int, int]:
        """Overall (f_t, f_h, f_w)."""
        return tuple(int(np.prod([f[i] for f in self.block_factors])) for i in range(3))

    @property
    def spec(self) -> CompressionSpec:
        ft, fh, fw = self.factors
        return CompressionSpec(fh, fw, ft, self.latent_channels, 1 if self.causal else 0)

    def dec_channels(self) -> tuple:
        return tuple(self.decoder_channels) if self.decoder_channels else tuple(reversed(self.block_channels))

    @classmethod
    def lite(cls, **kw) -> "AEConfig":
        """Halved widths in the two decoder blocks nearest RGB, group-causal decoder convs."""
        cfg = cls(**kw)
        ch = list(cfg.dec_channels())
        for i in range(max(0, len(ch) - 2), len(ch)):
            ch[i] = max(1, ch[i] // 2)
        # group size follows the temporal upsampling already applied before each block
        sizes, cum = [], 1
        for f in reversed(cfg.block_factors):
            sizes.append(min(cum, 4))
            cum *= f[0]
        cfg.decoder_channels = tuple(ch)
        cfg.decoder_modes = tuple(f"group_causal:{g}" for g in sizes)
        return cfg


class Encoder(Module):
    def __init__(self, cfg: AEConfig, rng: Rng):
        self.cfg = cfg
        mode = ConvMode("causal" if cfg.causal else "non_causal")
        rngs = rng.split(3 * len(cfg.block_channels) + 2)
        self.stem = VideoConv(cfg.in_channels, cfg.stem_channels, rngs[0], mode=mode)
        self.blocks, self.attn, self.down = [], [], []
        c_in = cfg.stem_channels
        for i, (c_out, f, use_attn) in enumerate(zip(cfg.block_channels, cfg.block_factors, cfg.attention)):
            self.blocks.append(ResBlock(c_in, rngs[3 * i + 1], mode))
            self.attn.append(HWAttention(c_in, rngs[3 * i + 2], cfg.heads) if use_attn else None)
            self.down.append(Downsample(c_in, c_out, f, rngs[3 * i + 3], causal=cfg.causal))
            c_in = c_out
        self.head = VideoConv(c_in, cfg.latent_channels, rngs[-1], mode=mode)

    def __call__(self, v: Tensor, cache: StreamCache | None = None):
        x = self.stem(v, cache)
        feats = []
        for block, attn, down in zip(self.blocks, self.attn, self.down):
            x = block(x, cache)
            if attn is not None:
                x = x + attn(pixel_norm(x))
            x = down(x, cache)
            feats.append(x[:, 0:1])
        z = self.head(pixel_norm(x), cache)
        n = self.cfg.inject_blocks
        # decoder order: deepest encoder block first
        inject = list(reversed(feats[len(feats) - n:])) if n else []
        return z, inject


class Decoder(Module):
    def __init__(self, cfg: AEConfig, rng: Rng):
        self.cfg = cfg
        enc_out = list(cfg.block_channels)
        dec_ch = cfg.dec_channels()
        n = len(dec_ch)
        rngs = rng.split(4 * n + 2)
        modes = [ConvMode.parse(m) if isinstance(m, str) else m for m in cfg.decoder_modes]
        factors = list(reversed(cfg.block_factors))
        self.head_in = VideoConv(cfg.latent_channels, dec_ch[0], rngs[0], mode=modes[0])
        self.blocks, self.attn, self.cross, self.up = [], [], [], []
        for j in range(n):
            c = dec_ch[j]
            c_next = dec_ch[j + 1] if j + 1 < n else cfg.stem_channels
            self.blocks.append(ResBlock(c, rngs[4 * j + 1], modes[j], noise_weight=cfg.noise_weight))
            use_attn = cfg.attention[n - 1 - j]
            self.attn.append(HWAttention(c, rngs[4 * j + 2], cfg.heads) if use_attn else None)
            enc_c = enc_out[n - 1 - j]
            self.cross.append(FirstFrameCrossAttention(c, enc_c, rngs[4 * j + 3]) if j < cfg.inject_blocks else None)
            self.up.append(Upsample(c, c_next, factors[j], rngs[4 * j + 4], causal=cfg.causal))
        self.out = VideoConv(cfg.stem_channels, cfg.in_channels, rngs[-1], mode=modes[-1])

    def __call__(self, z: Tensor, feats: Sequence[Tensor] | None = None, rng: Rng | None = None) -> Tensor:
        if feats is not None and len(feats) != self.cfg.inject_blocks:
            raise ValueError(f"expected {self.cfg.inject_blocks} injection features, got {len(feats)}")
        x = self.head_in(z)
        for j, (block, attn, cross, up) in enumerate(zip(self.blocks, self.attn, self.cross, self.up)):
            x = block(x, rng=rng)
            if attn is not None:
                x = x + attn(pixel_norm(x))
            if cross is not None and feats is not None:
                f = feats[j]
                if f.shape[0] != cross.wk.shape[0] or f.shape[2:] != x.shape[2:]:
                    raise ValueError(f"feature {j} shape {f.shape} does not fit decoder block {x.shape}")
                x = x + cross(x, f)
            x = up(x)
        return self.out(T.silu(pixel_norm(x)))


class Autoencoder(Module):
    def __init__(self, cfg: AEConfig, rng: Rng):
        self.cfg = cfg
        r_enc, r_dec = rng.split(2)
        self.encoder = Encoder(cfg, r_enc)
        self.decoder = Decoder(cfg, r_dec)

    def encode(self, v: Tensor) -> tuple[LatentVideo, list[Tensor]]:
        self._check_video(v.shape)
        z, feats = self.encoder(T.as_tensor(v))
        return LatentVideo(z, self.cfg.spec, self.cfg.causal), feats

    def encode_chunked(self, v: Tensor, chunks: Sequence[int]) -> tuple[LatentVideo, list[Tensor]]:
        """Encode a clip chunk by chunk, carrying causal caches between chunks."""
        v = T.as_tensor(v)
        self._check_video(v.shape)
        if sum(chunks) != v.shape[1]:
            raise ValueError(f"chunks {list(chunks)} do not cover {v.shape[1]} frames")
        ft = self.cfg.factors[0]
        if (chunks[0] - 1) % ft or any(c % ft for c in chunks[1:]):
            raise ValueError(f"chunks must be (1 + m*{ft}, m*{ft}, ...)")
        cache = StreamCache()
        zs, feats = [], None
        start = 0
        for n in chunks:
            z, f = self.encoder(v[:, start:start + n], cache)
            feats = f if feats is None else feats
            zs.append(z)
            start += n
        return LatentVideo(T.concat(zs, axis=1), self.cfg.spec, self.cfg.causal), feats

    def decode(self, z, feats=None, rng: Rng | None = None) -> Tensor:
        zt = z.z if isinstance(z, LatentVideo) else T.as_tensor(z)
        return self.decoder(zt, feats, rng)

    def _check_video(self, shape):
        if len(shape) != 4 or shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected a ({self.cfg.in_channels}, T, H, W) video, got {shape}")
        self.cfg.spec.latent_shape(shape)


# -- reconstruction loss ----------------------------------------------------------------

def squared_error_perceptual(v: Tensor, v_hat: Tensor) -> Tensor:
    """Stand-in for a learned perceptual metric."""
    d = v_hat - v
    return (d * d).mean()


def zero_term(v: Tensor, v_hat: Tensor) -> Tensor:
    return Tensor(0.0)


def ae_loss(v, v_hat, perceptual: Callable = zero_term, gan: Callable = zero_term,
            w_perceptual: float = 0.1, w_gan: float = 0.1) -> Tensor:
    """L1 + 0.1 * perceptual + 0.1 * adversarial."""
    v, v_hat = T.as_tensor(v), T.as_tensor(v_hat)
    if v.shape != v_hat.shape:
        raise ValueError(f"shape mismatch {v.shape} vs {v_hat.shape}")
    loss = T.abs_(v_hat - v).mean()
    return loss + w_perceptual * perceptual(v, v_hat) + w_gan * gan(v, v_hat)
