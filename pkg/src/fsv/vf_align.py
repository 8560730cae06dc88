"""Alignment of autoencoder latents with frame-level teacher features.

The latent is mapped to the teacher's channel width by a learnable matrix,
resized spatially, and compared location by location (marginal cosine) and
through its location-by-location cosine matrix (marginal distance matrix).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor
from .numerics import tensor as T
from .numerics.ops import avgpool_temporal, interp_spatial

COS_EPS = 1e-8


@dataclass
class TeacherFeatures:
    f: Tensor
    source: str = "synthetic"

    @property
    def shape(self):
        return self.f.shape


@dataclass
class AlignedPair:
    z_a: Tensor
    f_a: Tensor
    m1: float = 0.5
    m2: float = 0.25
    alpha: float = 0.5

    def __post_init__(self):
        if self.z_a.shape != self.f_a.shape:
            raise ValueError(f"aligned shapes differ: {self.z_a.shape} vs {self.f_a.shape}")
        if not (0 <= self.m1 < 1 and 0 <= self.m2 < 1):
            raise ValueError("margins must lie in [0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def align_dims(z, features, W, pool_kernel: int = 4, m1: float = 0.5, m2: float = 0.25,
               alpha: float = 0.5) -> AlignedPair:
    """Bring a (c, t, h, w) latent and (c', t', h', w') features to a common (c', t, h', w')."""
    z = getattr(z, "z", z)
    z = T.as_tensor(z)
    F = T.as_tensor(getattr(features, "f", features))
    W = T.as_tensor(W)
    c, t, h, w = z.shape
    c2, t2, h2, w2 = F.shape
    if W.shape != (c2, c):
        raise ValueError(f"channel map must be ({c2}, {c}), got {W.shape}")
    zc = (W @ z.reshape(c, t * h * w)).reshape(c2, t, h, w)
    z_a = interp_spatial(zc, (h2, w2))
    f_a = avgpool_temporal(F, pool_kernel, skip_first=True)
    if f_a.shape[1] != t:
        raise ValueError(f"pooled teacher has {f_a.shape[1]} frames, latent has {t}")
    return AlignedPair(z_a, f_a, m1, m2, alpha)


def _unit_columns(x: Tensor) -> Tensor:
    """(c, N) -> columns scaled to unit length; norms are clamped below at COS_EPS."""
    norm = T.sqrt((x * x).sum(axis=0, keepdims=True))
    return x / (norm + T.relu(COS_EPS - norm))


def _locations(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def v_mcos(pair: AlignedPair) -> Tensor:
    """Mean over locations of ReLU(1 - m1 - cos(z, f))."""
    uz = _unit_columns(_locations(pair.z_a))
    uf = _unit_columns(_locations(pair.f_a))
    cos = (uz * uf).sum(axis=0)
    return T.relu(1.0 - pair.m1 - cos).mean()


def v_mdms(pair: AlignedPair, n_pairs: int | None = None, rng: Rng | None = None) -> Tensor:
    """Mean over ordered location pairs of ReLU(|cos(z_p, z_q) - cos(f_p, f_q)| - m2).

    With ``n_pairs`` set, averages over that many uniformly drawn ordered pairs
    instead of all N^2 (an unbiased estimate of the exact mean).
    """
    uz = _unit_columns(_locations(pair.z_a))
    uf = _unit_columns(_locations(pair.f_a))
    if n_pairs is None:
        gz = uz.T @ uz
        gf = uf.T @ uf
        return T.relu(T.abs_(gz - gf) - pair.m2).mean()
    if rng is None:
        raise ValueError("pair subsampling needs an rng")
    n = uz.shape[1]
    p = rng.integers(0, n, n_pairs)
    q = rng.integers(0, n, n_pairs)
    cz = (T.take(uz, p, 1) * T.take(uz, q, 1)).sum(axis=0)
    cf = (T.take(uf, p, 1) * T.take(uf, q, 1)).sum(axis=0)
    return T.relu(T.abs_(cz - cf) - pair.m2).mean()


def vf_loss(pair: AlignedPair, **mdms_kw) -> Tensor:
    return pair.alpha * (v_mcos(pair) + v_mdms(pair, **mdms_kw))


def vf_total(pair: AlignedPair, ae_loss_value, **mdms_kw) -> Tensor:
    """L_ae + alpha * (v_mcos + v_mdms)."""
    return T.as_tensor(ae_loss_value) + vf_loss(pair, **mdms_kw)


class SyntheticTeacher:
    """Frame-wise stand-in for a pretrained vision backbone.

    Features are tanh of a fixed random linear map of p x p RGB patches, plus a
    fixed smooth code of the patch position. Both maps depend only on the seed,
    so a constant video yields features that vary only through position.
    """

    def __init__(self, out_channels: int, rng: Rng, patch: int = 4, in_channels: int = 3,
                 pos_scale: float = 0.1):
        self.out_channels = out_channels
        self.patch = patch
        d_in = in_channels * patch * patch
        self.proj = rng.normal((out_channels, d_in)) / np.sqrt(d_in)
        self.pos_freq = rng.normal((out_channels, 2)) * 2.0
        self.pos_phase = rng.uniform((out_channels,), 0, 2 * np.pi)
        self.pos_scale = pos_scale

    def __call__(self, v) -> TeacherFeatures:
        v = np.asarray(getattr(v, "data", v), dtype=np.float64)
        c, t, H, W = v.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"frame size {(H, W)} not divisible by patch {p}")
        h, w = H // p, W // p
        patches = v.reshape(c, t, h, p, w, p).transpose(1, 2, 4, 0, 3, 5).reshape(t, h, w, c * p * p)
        feat = np.tanh(patches @ self.proj.T)  # (t, h, w, c')
        yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pos = np.sin(self.pos_freq[:, 0, None, None] * yy + self.pos_freq[:, 1, None, None] * xx
                     + self.pos_phase[:, None, None])  # (c', h, w)
        out = feat.transpose(3, 0, 1, 2) + self.pos_scale * pos[:, None]
        return TeacherFeatures(Tensor(out), "synthetic")


def synthetic_teacher(v, rng: Rng, out_channels: int, patch: int = 4) -> TeacherFeatures:
    return SyntheticTeacher(out_channels, rng, patch)(v)
