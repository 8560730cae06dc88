"""Latent-space super-resolution.

A low-resolution latent is projected to four times its channels, shuffled
into a grid twice as fine in height and width, and refined by residual
blocks. Training pairs come from encoding a video and its bicubic half-size
copy with the same frozen autoencoder.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autoencoder import ConvMode, VideoConv, pixel_norm, squared_error_perceptual, time_spatial_shuffle
from .nn import AdamW, Module
from .numerics import NonFiniteError, Rng, Tensor
from .numerics import tensor as T

SPATIAL = ConvMode("non_causal")

# Keys cubic kernel (a = -0.5) sampled at distances 1.5, 0.5, 0.5, 1.5.
BICUBIC_TAPS_2X = np.array([-0.0625, 0.5625, 0.5625, -0.0625])


@dataclass
class UpsamplerConfig:
    c_latent: int
    width: int = 32
    n_res_blocks: int = 4
    spatial_factor: int = 2

    def __post_init__(self):
        if self.spatial_factor < 1:
            raise ValueError("spatial_factor must be >= 1")
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")


class UpResBlock(Module):
    """pixel norm -> conv -> silu -> conv (zero init) -> residual add, all spatial 3x3."""

    def __init__(self, channels: int, width: int, rng: Rng):
        r1, r2 = rng.split(2)
        self.conv1 = VideoConv(channels, width, r1, kernel=(1, 3, 3), mode=SPATIAL)
        self.conv2 = VideoConv(width, channels, r2, kernel=(1, 3, 3), mode=SPATIAL, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.silu(self.conv1(pixel_norm(x))))


class LatentUpsampler(Module):
    def __init__(self, cfg: UpsamplerConfig, rng: Rng):
        self.cfg = cfg
        f = cfg.spatial_factor
        r = rng.split(cfg.n_res_blocks + 1)
        self.proj = VideoConv(cfg.c_latent, cfg.c_latent * f * f, r[0], kernel=(1, 3, 3), mode=SPATIAL)
        self.blocks = [UpResBlock(cfg.c_latent, cfg.width, r[i + 1]) for i in range(cfg.n_res_blocks)]

    def prefix(self, z) -> Tensor:
        """Projection and shuffle only; equals the full stack while residual outputs are zero."""
        z = T.as_tensor(getattr(z, "z", z))
        if z.ndim != 4 or z.shape[0] != self.cfg.c_latent:
            raise ValueError(f"expected a ({self.cfg.c_latent}, t, h, w) latent, got {z.shape}")
        f = self.cfg.spatial_factor
        return time_spatial_shuffle(self.proj(z), (1, f, f), "up")

    def __call__(self, z) -> Tensor:
        x = self.prefix(z)
        for b in self.blocks:
            x = b(x)
        return x


def upsample(z_low, params: LatentUpsampler) -> Tensor:
    return params(z_low)


# -- data pipeline ------------------------------------------------------------------------

def bicubic_down_matrix(n: int) -> np.ndarray:
    """(n/2, n) matrix of the 2x bicubic reduction with clamped borders."""
    if n % 2:
        raise ValueError(f"length {n} is odd")
    mat = np.zeros((n // 2, n))
    for i in range(n // 2):
        for k, w in enumerate(BICUBIC_TAPS_2X):
            mat[i, min(max(2 * i - 1 + k, 0), n - 1)] += w
    return mat


def bicubic_down(v, factor: int = 2) -> Tensor:
    """Halve height and width of a (c, t, H, W) video frame by frame."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    v = T.as_tensor(v)
    H, W = v.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"frame size {(H, W)} must be even")
    y = T.linear_along(v, bicubic_down_matrix(H), axis=-2)
    return T.linear_along(y, bicubic_down_matrix(W), axis=-1)


# -- objective ------------------------------------------------------------------------------

@dataclass
class UpsampleLossWeights:
    a1: float = 0.1
    a2: float = 0.1
    a3: float = 0.1
    a3_schedule: tuple | None = (0.1, 1.0, 100)

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.a3_schedule:  # TOML has no null; an empty list means a fixed a3
            self.a3_schedule = None
        else:
            start, end, steps = self.a3_schedule
            if start < 0 or end < start or steps < 1:
                raise ValueError("a3 ramp must be nondecreasing, nonnegative, with >= 1 step")

    def a3_at(self, step: int) -> float:
        """Linear ramp from start to end over ``steps``; constant afterwards."""
        if self.a3_schedule is None:
            return self.a3
        start, end, steps = self.a3_schedule
        frac = min(max(step, 0) / steps, 1.0)
        return end if frac == 1.0 else start + (end - start) * frac

    def at(self, step: int) -> "UpsampleLossWeights":
        return UpsampleLossWeights(self.a1, self.a2, self.a3_at(step), None)


def upsampler_loss(z_high_hat, z_high, v_high, decoder: Callable, weights: UpsampleLossWeights,
                   perceptual: Callable = squared_error_perceptual) -> Tensor:
    """a1 |z_hat - z| + a2 |D(z_hat) - v| + a3 perceptual(D(z_hat), v), means over elements.

    ``weights.a3`` is used as is; call ``weights.at(step)`` for the ramped value.
    The perceptual callable is not invoked when a3 is zero.
    """
    z_hat, z = T.as_tensor(z_high_hat), T.as_tensor(z_high)
    v = T.as_tensor(v_high)
    if z_hat.shape != z.shape:
        raise ValueError(f"latent shapes differ: {z_hat.shape} vs {z.shape}")
    loss = weights.a1 * T.abs_(z_hat - z).mean()
    if weights.a2 == 0 and weights.a3 == 0:
        return loss
    v_hat = decoder(z_hat)
    if v_hat.shape != v.shape:
        raise ValueError(f"decoded shape {v_hat.shape} does not match target {v.shape}")
    loss = loss + weights.a2 * T.abs_(v_hat - v).mean()
    if weights.a3 != 0:
        loss = loss + weights.a3 * perceptual(v, v_hat)
    return loss


# -- training ---------------------------------------------------------------------------------

@dataclass
class UpsamplerPair:
    z_low: np.ndarray
    z_high: np.ndarray
    v_high: np.ndarray


def make_pair(ae, v_high) -> UpsamplerPair:
    """Encode a video and its bicubic half-size copy with a frozen autoencoder."""
    v_high = np.asarray(getattr(v_high, "data", v_high), dtype=np.float64)
    with T.no_grad():
        z_high = ae.encode(Tensor(v_high))[0].z.data
        z_low = ae.encode(bicubic_down(v_high))[0].z.data
    return UpsamplerPair(z_low, z_high, v_high)


@dataclass
class UpsamplerTrainConfig:
    steps: int = 1000
    lr: float = 3e-3
    seed: int = 0
    weights: UpsampleLossWeights = field(default_factory=UpsampleLossWeights)
    # (first step, (H, W)) entries; the dataset is asked for clips of the active size.
    curriculum: Sequence = ((0, None),)
    log_every: int = 1


def _size_at(curriculum, step):
    size = curriculum[0][1]
    for start, s in curriculum:
        if step >= start:
            size = s
    return size


def train_upsampler(dataset: Callable, config: UpsamplerTrainConfig, model: LatentUpsampler,
                    decoder: Callable, perceptual: Callable = squared_error_perceptual,
                    csv_out: io.TextIOBase | None = None) -> dict:
    """Optimize ``model`` on pairs from ``dataset(step, size) -> UpsamplerPair``.

    Writes step, loss, latent_l1, a3, wallclock rows to ``csv_out`` and returns
    the final metrics. Only upsampler parameters are updated.
    """
    opt = AdamW(model.parameters(), lr=config.lr)
    writer = csv.writer(csv_out) if csv_out is not None else None
    if writer:
        writer.writerow(["step", "loss", "latent_l1", "a3", "wallclock"])
    t0 = time.perf_counter()
    history = []
    for step in range(config.steps):
        pair = dataset(step, _size_at(config.curriculum, step))
        w = config.weights.at(step)
        opt.zero_grad()
        try:
            z_hat = model(Tensor(pair.z_low))
            loss = upsampler_loss(z_hat, pair.z_high, pair.v_high, decoder, w, perceptual)
            loss.backward()
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} (step {step})") from exc
        opt.step()
        l1 = float(np.abs(z_hat.data - pair.z_high).mean())
        history.append((step, float(loss.data), l1, w.a3))
        if writer and step % config.log_every == 0:
            writer.writerow([step, f"{float(loss.data):.10g}", f"{l1:.10g}", f"{w.a3:.6g}",
                             f"{time.perf_counter() - t0:.3f}"])
    with T.no_grad():
        pair = dataset(config.steps, _size_at(config.curriculum, config.steps))
        final_l1 = float(np.abs(model(Tensor(pair.z_low)).data - pair.z_high).mean())
    return {"steps": config.steps, "initial_loss": history[0][1] if history else None,
            "final_loss": history[-1][1] if history else None, "latent_l1": final_l1,
            "history": history}
