"""Compression accounting, DIT sequence length and Gride intrinsic dimension."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class CompressionSpec:
    """Downsample factors (input size / latent size) and latent channel count."""

    f_h: int
    f_w: int
    f_t: int
    c: int
    r_t: int = 1

    def __post_init__(self):
        for name in ("f_h", "f_w", "f_t", "c"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.r_t not in (0, 1):
            raise ValueError("r_t must be 0 or 1")

    def latent_shape(self, video_shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        """(3, T, H, W) -> (c, t, h, w); raises if the factors do not divide."""
        _, T, H, W = video_shape
        if (T - self.r_t) % self.f_t:
            raise ValueError(f"T={T} incompatible with f_t={self.f_t}, r_t={self.r_t}")
        if H % self.f_h or W % self.f_w:
            raise ValueError(f"H, W = {H}, {W} not divisible by {self.f_h}, {self.f_w}")
        return (self.c, self.r_t + (T - self.r_t) // self.f_t, H // self.f_h, W // self.f_w)


def total_compression(spec: CompressionSpec) -> float:
    """Denominator N of the "1:N" total compression ratio.

    Video elements per latent element: 3 * f_h * f_w * f_t / c.
    """
    return spec.f_h * spec.f_w * spec.f_t * 3 / spec.c


# (name, f_h, f_w, f_t, c, reported 1:N); c is the latent width implied by each row.
TABLE2_ROWS = [
    ("Hunyuan VAE", 8, 8, 4, 16, 48),
    ("Wan-2.1 VAE", 8, 8, 4, 16, 48),
    ("CogVideoX-1.5 VAE", 8, 8, 4, 16, 48),
    ("Step-Video VAE", 16, 16, 8, 64, 96),
    ("VidTok", 8, 8, 4, 8, 96),
    ("Cosmos-CV", 8, 8, 8, 16, 96),
    ("LTX-Video", 32, 32, 8, 128, 192),
    ("VidTok", 8, 8, 4, 4, 192),
    ("Cosmos-CV", 16, 16, 8, 16, 384),
    ("VidTok", 16, 16, 4, 4, 768),
    ("FSAE-Standard", 64, 64, 4, 128, 384),
    ("FSAE-Lite", 64, 64, 4, 128, 384),
]


def sequence_length(F: int, H: int, W: int, patch: int = 64, f_t: int = 4) -> int:
    """Token count (1 + F/4) * (H/64) * (W/64) for F+1 frames of H x W pixels."""
    for name, value, div in (("F", F, f_t), ("H", H, patch), ("W", W, patch)):
        if value < 0 or value % div:
            raise ValueError(f"{name}={value} is not divisible by {div}")
    return (1 + F // f_t) * (H // patch) * (W // patch)


# -- intrinsic dimension --------------------------------------------------------------

class GrideError(RuntimeError):
    pass


def neighbor_distances(coords: np.ndarray, k_max: int) -> np.ndarray:
    """Distances to the 1..k_max nearest neighbours (self excluded), shape (n, k_max)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < k_max + 1:
        raise ValueError(f"need more than {k_max} points, got {coords.shape[0]}")
    dist, _ = cKDTree(coords).query(coords, k=k_max + 1)
    return dist[:, 1:]


def gride_mus(dist: np.ndarray, k: int) -> np.ndarray:
    """Ratios r_{2k} / r_k per point from a neighbour-distance table."""
    return dist[:, 2 * k - 1] / dist[:, k - 1]


def gride_loglik(d: float, log_mu: np.ndarray, k: int) -> float:
    """sum_i [log d - (d k + 1) log mu_i + (k - 1) log(1 - mu_i^-d)]."""
    ll = log_mu.size * np.log(d) - (d * k + 1) * log_mu.sum()
    if k > 1:
        ll += (k - 1) * np.log(-np.expm1(-d * log_mu)).sum()
    return float(ll)


def _loglik_derivs(d: float, log_mu: np.ndarray, k: int) -> tuple[float, float]:
    n = log_mu.size
    g = n / d - k * log_mu.sum()
    h = -n / d ** 2
    if k > 1:
        u = np.exp(-d * log_mu)
        one_minus = -np.expm1(-d * log_mu)
        g += (k - 1) * np.sum(log_mu * u / one_minus)
        h -= (k - 1) * np.sum(log_mu ** 2 * u / one_minus ** 2)
    return float(g), float(h)


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def gride_from_mus(mus: np.ndarray, k: int, d_max: float, tol: float = 1e-8) -> float:
    """Maximum-likelihood dimension from distance ratios.

    Golden-section search on [1e-3, d_max], then Newton polishing so the
    returned value is a smooth function of the inputs.
    """
    mus = np.asarray(mus, dtype=np.float64)
    tied = mus <= 1.0
    if tied.any():
        warnings.warn(f"dropping {int(tied.sum())} points with tied neighbour distances", RuntimeWarning)
        mus = mus[~tied]
    if mus.size == 0:
        raise GrideError("no usable distance ratios")
    log_mu = np.log(mus)
    lo, hi = 1e-3, float(d_max)
    d = _golden_max(lambda x: gride_loglik(x, log_mu, k), lo, hi, tol)
    if d > hi - 10 * tol:
        raise GrideError(f"likelihood maximum at the upper bracket edge {hi}")
    for _ in range(20):
        g, h = _loglik_derivs(d, log_mu, k)
        if h >= 0:
            break
        step = g / h
        d_new = min(max(d - step, lo), hi)
        if abs(d_new - d) < 1e-15 * max(1.0, d):
            d = d_new
            break
        d = d_new
    return float(d)


def twonn_closed_form(mus: np.ndarray) -> float:
    return float(len(mus) / np.sum(np.log(mus)))


def _as_cloud(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2:
        raise ValueError("point cloud must be a (n_points, ambient_dim) matrix")
    return coords


def gride_estimate(coords, k: int) -> float:
    """Gride intrinsic dimension using the k-th and 2k-th neighbours."""
    coords = _as_cloud(coords)
    n, dim = coords.shape
    if k < 1 or n <= 2 * k + 1:
        raise ValueError(f"need k >= 1 and more than {2 * k + 1} points")
    dist = neighbor_distances(coords, 2 * k)
    return gride_from_mus(gride_mus(dist, k), k, d_max=2.0 * dim)


def id_profile(coords, ks=(2, 4, 8, 16, 32, 64)) -> list[float]:
    """Gride estimate for each neighbour order, sharing one neighbour query."""
    coords = _as_cloud(coords)
    ks = list(ks)
    if not ks or ks != sorted(ks):
        raise ValueError("ks must be a nonempty ascending list")
    n, dim = coords.shape
    if n <= 2 * ks[-1] + 1:
        raise ValueError(f"need more than {2 * ks[-1] + 1} points for k={ks[-1]}")
    dist = neighbor_distances(coords, 2 * ks[-1])
    return [gride_from_mus(gride_mus(dist, k), k, d_max=2.0 * dim) for k in ks]


def flatten_latents(latents: np.ndarray, mode: str = "video") -> np.ndarray:
    """Turn a stack of (c, t, h, w) latents into a point cloud.

    ``video`` gives one point per clip; ``token`` one c-vector per latent location.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if mode == "video":
        return latents.reshape(latents.shape[0], -1)
    if mode == "token":
        return np.moveaxis(latents, 1, -1).reshape(-1, latents.shape[1])
    raise ValueError(f"unknown flattening mode {mode!r}")
