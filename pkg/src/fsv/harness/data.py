"""Deterministic synthetic video generators standing in for real training corpora."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Rng

KINDS = ("moving-blobs", "low-rank-dynamics", "textured-noise")


@dataclass
class SyntheticVideoSource:
    """Clips of shape (3, frames, height, width) with values in (-1, 1).

    ``low-rank-dynamics`` clips are a smooth function of ``latent_dim_true``
    uniform parameters, so the clip manifold has exactly that intrinsic
    dimension. ``textured-noise`` adds a small i.i.d. texture on top, which is
    a high-dimensional nuisance. ``moving-blobs`` draws Gaussian blobs on
    linear trajectories.
    """

    kind: str = "low-rank-dynamics"
    latent_dim_true: int = 4
    frames: int = 5
    height: int = 16
    width: int = 16
    basis_seed: int = 1234
    texture_amp: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        brng = Rng(self.basis_seed, 1)
        t = np.linspace(0.0, 1.0, self.frames)[:, None, None]
        yy, xx = np.meshgrid(np.linspace(0, 1, self.height), np.linspace(0, 1, self.width), indexing="ij")
        d = self.latent_dim_true
        freqs = brng.uniform((d, 3, 3), 0.5, 2.5)
        phases = brng.uniform((d, 3), 0, 2 * np.pi)
        basis = np.empty((d, 3, self.frames, self.height, self.width))
        for i in range(d):
            for c in range(3):
                fy, fx, ft = freqs[i, c]
                basis[i, c] = np.sin(2 * np.pi * (fy * yy + fx * xx + ft * t) + phases[i, c])
        self._basis = basis
        self._offset = 0.2 * brng.normal((3, 1, 1, 1))

    def params(self, seed: int) -> np.ndarray:
        return Rng(seed, 2).uniform((self.latent_dim_true,), -1.0, 1.0)

    def sample(self, seed: int) -> np.ndarray:
        rng = Rng(seed, 3)
        if self.kind == "moving-blobs":
            return self._blobs(rng)
        theta = self.params(seed)
        clip = np.tanh(np.tensordot(theta, self._basis, axes=1) + self._offset)
        if self.kind == "textured-noise":
            clip = clip + self.texture_amp * rng.normal(clip.shape)
        return clip

    def batch(self, seeds) -> np.ndarray:
        return np.stack([self.sample(s) for s in seeds])

    def _blobs(self, rng: Rng) -> np.ndarray:
        yy, xx = np.meshgrid(np.linspace(0, 1, self.height), np.linspace(0, 1, self.width), indexing="ij")
        clip = np.full((3, self.frames, self.height, self.width), -0.8)
        for _ in range(2):
            pos = rng.uniform((2,), 0.2, 0.8)
            vel = rng.uniform((2,), -0.1, 0.1)
            color = rng.uniform((3,), -0.5, 1.5)
            width = rng.uniform((), 0.05, 0.15)
            for f in range(self.frames):
                cy, cx = pos + f * vel
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
                clip[:, f] += color[:, None, None] * blob
        return np.tanh(clip)
