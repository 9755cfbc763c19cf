"""Minimal parameter containers built on :class:`Tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters and child modules are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        bound = init_scale / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight) if T.as_tensor(x).ndim >= 2 else None
        if y is None:
            y = T.reshape(T.matmul(T.reshape(x, (1, -1)), self.weight), (-1,))
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class GRUCell(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.x_proj = Linear(d_in, 3 * d_hidden, rng)
        self.h_proj = Linear(d_hidden, 3 * d_hidden, rng)
        self.d = d_hidden

    def __call__(self, x, h) -> Tensor:
        d = self.d
        gx = self.x_proj(x)
        gh = self.h_proj(h)
        r = T.sigmoid(gx[..., :d] + gh[..., :d])
        z = T.sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
        n = T.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
        return (1.0 - z) * n + z * h
