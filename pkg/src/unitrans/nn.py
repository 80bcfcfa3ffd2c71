"""Layers, parameter containers and the Adam optimizer."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)


class Module:
    """Anything exposing an ordered ``name -> Tensor`` parameter mapping."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        std = scale / np.sqrt(n_in)
        self.weight = param(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x):
        if x.ndim == 1:
            return (ad.matmul(x.reshape(1, -1), self.weight) + self.bias).reshape(-1)
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self):
        return {"w": self.weight, "b": self.bias}


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes: Iterable[int], rng: np.random.Generator):
        sizes = list(sizes)
        self.sizes = sizes
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"{i}/{k}"] = v
        return out


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))


class Adam:
    """Adam over a fixed list of parameter tensors, with optional global-norm clipping."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = global_norm(grads)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * np.float32(scale)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(np.float32)
        return norm
