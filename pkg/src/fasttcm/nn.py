"""Parameter containers and the layers shared by the encoders and the bridge."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything holding named parameters as attributes (tensors, modules, lists of modules)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def param(data: np.ndarray, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, scale: float = 1.0):
        self.weight = param(rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``[B, N, w]`` queries and ``[B, M, w]`` keys/values."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, out_scale: float = 1.0):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, width, width)
        self.k = Linear(rng, width, width)
        self.v = Linear(rng, width, width)
        self.o = Linear(rng, width, width, scale=out_scale)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, w = x.shape
        return x.reshape(b, n, self.heads, w // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        b, n, w = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(w // self.heads))
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, w)
        return self.o(ctx)


class FeedForward(Module):
    """Two-layer transformer MLP with GELU (smooth, so finite-difference checks stay sharp)."""

    def __init__(self, rng: np.random.Generator, width: int, hidden: int, out_scale: float = 1.0):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width, scale=out_scale)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
