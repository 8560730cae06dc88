"""Differentiable building blocks layered on :mod:`fsv.numerics.tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, linear_along, make, take


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (x,), backward, "softmax")


def conv3d(x, weight, bias=None) -> Tensor:
    """Valid (unpadded) 3D cross-correlation.

    ``x`` is (C, T, H, W) or (B, C, T, H, W); ``weight`` is (O, C, kt, kh, kw).
    Padding is the caller's job so that causal / replicated layouts compose
    from ``take`` and ``pad``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    B, C, T, H, W = xd.shape
    O, Cw, kt, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv3d channel mismatch: input {C}, weight {Cw}")
    To, Ho, Wo = T - kt + 1, H - kh + 1, W - kw + 1
    if min(To, Ho, Wo) < 1:
        raise ValueError(f"conv3d kernel {weight.shape[2:]} larger than input {xd.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kt, kh, kw), axis=(2, 3, 4))
    # (B, To, Ho, Wo, C, kt, kh, kw) -> (B, P, C*K)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B, To * Ho * Wo, C * kt * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T  # (B, P, O)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(B, O, To, Ho, Wo)

    def backward(g):
        gb = g[None] if unbatched else g
        gmat = gb.reshape(B, O, -1)  # (B, O, P)
        gw = np.einsum("bop,bpk->ok", gmat, cols).reshape(weight.shape)
        gcols = np.einsum("bop,ok->bpk", gmat, wmat).reshape(B, To, Ho, Wo, C, kt, kh, kw)
        gx = np.zeros_like(xd)
        for a in range(kt):
            for b in range(kh):
                for c in range(kw):
                    gx[:, :, a:a + To, b:b + Ho, c:c + Wo] += gcols[..., a, b, c].transpose(0, 4, 1, 2, 3)
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out[0] if unbatched else out, parents, backward, "conv3d")


def replicate_pad_axis(x, axis: int, before: int, after: int) -> Tensor:
    """Pad by repeating the edge slices along one axis."""
    x = as_tensor(x)
    n = x.shape[axis]
    idx = np.clip(np.arange(-before, n + after), 0, n - 1)
    return take(x, idx, axis)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (n_out, n_in)."""
    if n_out < 1 or n_in < 1:
        raise ValueError("interpolation sizes must be >= 1")
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def interp_spatial(x, target: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes of a (c, t, h, w) tensor."""
    x = as_tensor(x)
    h2, w2 = target
    if h2 < 1 or w2 < 1:
        raise ValueError(f"zero-sized interpolation target {target}")
    h, w = x.shape[-2:]
    if (h, w) == (h2, w2):
        return x
    y = linear_along(x, bilinear_matrix(h, h2), axis=-2)
    return linear_along(y, bilinear_matrix(w, w2), axis=-1)


def temporal_pool_matrix(t_in: int, kernel: int, skip_first: bool) -> np.ndarray:
    body = t_in - 1 if skip_first else t_in
    if kernel < 1 or body % kernel:
        raise ValueError(
            f"temporal length {t_in} incompatible with pooling kernel {kernel} (skip_first={skip_first})")
    n_out = body // kernel + (1 if skip_first else 0)
    mat = np.zeros((n_out, t_in))
    offset = 0
    if skip_first:
        mat[0, 0] = 1.0
        offset = 1
    for i in range(body // kernel):
        mat[offset + i, offset + i * kernel: offset + (i + 1) * kernel] = 1.0 / kernel
    return mat


def avgpool_temporal(x, kernel: int, skip_first: bool) -> Tensor:
    """Average consecutive frames of a (c, t', h, w) tensor; optionally pass frame 0 through."""
    x = as_tensor(x)
    return linear_along(x, temporal_pool_matrix(x.shape[1], kernel, skip_first), axis=1)


def layer_norm(x, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Affine-free normalization over one axis."""
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    return xc / ((var + eps) ** 0.5)


def attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes are batch/head."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    logits = (q @ k.T) * (1.0 / np.sqrt(d))
    return softmax(logits, axis=-1) @ v


def split_heads(x, heads: int) -> Tensor:
    """(..., n, D) -> (..., heads, n, D/heads)."""
    *lead, n, D = x.shape
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    y = x.reshape(tuple(lead) + (n, heads, D // heads))
    nd = y.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return y.transpose(axes)


def merge_heads(x) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads*dh)."""
    *lead, h, n, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes).reshape(tuple(lead) + (n, h * dh))
