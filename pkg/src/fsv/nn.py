"""Parameter containers and an AdamW optimizer for the autodiff core."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import Rng, Tensor
from .numerics import tensor as T
from .numerics.ops import conv3d


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


class Module:
    """Attribute-walking parameter registry; lists/tuples/dicts of modules are followed."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k in own:
                if own[k].shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k}: {own[k].shape} vs {np.shape(v)}")
                own[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    """y = x W + b acting on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(d_in)
        self.weight = param(rng.normal((d_in, d_out)) * scale)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = T.reshape(x, (1, -1)) @ self.weight
            y = T.reshape(y, (-1,))
        else:
            y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv3d(Module):
    """Weights and bias for a 3D convolution; padding policy lives with the caller."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: Rng, zero_init: bool = False):
        kt, kh, kw = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * kt * kh * kw
        scale = 0.0 if zero_init else 1.0 / np.sqrt(fan_in)
        self.kernel = (kt, kh, kw)
        self.weight = param(rng.normal((c_out, c_in, kt, kh, kw)) * scale)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)


class AdamW:
    """Decoupled weight decay Adam."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
