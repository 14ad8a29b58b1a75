"""Tiny parameter-owning layer system on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class. Parameters are requires_grad Tensors found by attribute walk.

    Attribute insertion order is the naming order, so parameter names are
    stable across runs for a fixed construction path.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if prefix else name
            yield from _walk_params(key, value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(arrays[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr.copy())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_params(key, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield key, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{key}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(f"{key}.{i}", item)


def _uniform(rng: np.random.Generator, shape, bound, dtype=np.float32):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """y = x @ W + b with x[..., in_dim]."""

    def __init__(self, in_dim, out_dim, rng, bias=True):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = _uniform(rng, (in_dim, out_dim), bound)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Ffn(Module):
    """linear -> silu -> linear. Activation choice is ours; expansion per config."""

    def __init__(self, dim, expansion, rng):
        if expansion < 1:
            raise ValueError("ffn expansion must be >= 1")
        hidden = int(dim * expansion)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.silu(self.fc1(x)))
