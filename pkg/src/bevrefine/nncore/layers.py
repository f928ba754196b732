"""Parameter containers built on the tensor ops.

A :class:`Module` registers parameters and submodules through attribute
assignment and exposes stable dotted names for checkpointing. Layers take an
explicit ``rng`` for initialization so model builds are reproducible.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Container with torch-style parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise ValueError(f"parameter name mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """Affine layer y = x @ W + b with W shaped (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, (in_dim, out_dim)), dtype)
        self.bias = parameter(np.zeros(out_dim), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def norm_groups(channels: int, target: int = 16) -> int:
    """Largest group count <= target that divides the channel count."""
    g = min(target, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups: int | None = None, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.num_groups = norm_groups(channels) if num_groups is None else num_groups
        self.gamma = parameter(np.ones(channels), dtype)
        self.beta = parameter(np.zeros(channels), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.num_groups, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding="same", bias: bool = True, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)), dtype)
        self.bias = parameter(np.zeros(out_ch), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        return T.dropout(x, self.p, train, rng)
