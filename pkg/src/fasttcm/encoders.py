"""Toy stand-ins for the CLIP image and text encoders.

The image encoder is a stack of stride-2 3x3 convolutions reaching total
stride ``s``.  The text encoder is a small pre-norm self-attention
transformer, randomly initialised from a fixed seed and then frozen, reading
out the final token and projecting ``D -> C``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from .tensor import DimensionError, Tensor

VOCAB = ("Text", "text", "word", "sign", "background", "photo", "a", "of")


class VocabularyError(KeyError):
    pass


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_blocks = int(math.log2(cfg.s))
        chans = [3] + [max(cfg.C >> (n_blocks - 1 - i), 8) for i in range(n_blocks)]
        chans[-1] = cfg.C
        self.kernels = []
        self.biases = []
        for i in range(n_blocks):
            fan_in = 9 * chans[i]
            last = i == n_blocks - 1
            std = (0.1 if last else math.sqrt(2.0)) / math.sqrt(fan_in)
            self.kernels.append(param(rng.normal(0.0, std, size=(3, 3, chans[i], chans[i + 1]))))
            self.biases.append(param(np.zeros(chans[i + 1])))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}conv{i}.weight"] = k
            out[f"{prefix}conv{i}.bias"] = b
        return out

    def __call__(self, image: Tensor) -> Tensor:
        """``[B, H, W, 3]`` (or unbatched ``[H, W, 3]``) in [0, 1] -> ``[B, H/s, W/s, C]``."""
        image = T.as_tensor(image)
        squeeze = image.ndim == 3
        if squeeze:
            image = image.reshape(1, *image.shape)
        if image.ndim != 4 or image.shape[1:] != (self.cfg.H, self.cfg.W, 3):
            raise DimensionError(
                f"image_encode expects [B, {self.cfg.H}, {self.cfg.W}, 3], got {image.shape}"
            )
        x = image
        last = len(self.kernels) - 1
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            x = T.conv2d(x, k, stride=2, padding=1) + b
            if i != last:
                x = T.relu(x)
        if squeeze:
            x = x.reshape(*x.shape[1:])
        return x


def global_pool(emb: Tensor) -> Tensor:
    """Spatial mean of a ``[..., h, w, C]`` embedding."""
    return T.mean(emb, axis=(-3, -2))


class WordEmbedding(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.table = param(rng.normal(0.0, 0.5, size=(len(VOCAB), cfg.D)), trainable=False)

    def __call__(self, token: str) -> Tensor:
        try:
            idx = VOCAB.index(token)
        except ValueError:
            raise VocabularyError(f"token {token!r} not in vocabulary {VOCAB}") from None
        return self.table[idx : idx + 1]


class TextBlock(Module):
    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, 4 * width)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.ln2(x))


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.length = cfg.n + 1
        self.pos = param(rng.normal(0.0, 0.1, size=(self.length, cfg.D)))
        self.blocks = [TextBlock(rng, cfg.D, cfg.text_heads) for _ in range(cfg.text_depth)]
        self.ln_final = LayerNorm(cfg.D)
        self.proj = param(rng.normal(0.0, 1.0 / math.sqrt(cfg.D * cfg.C), size=(cfg.D, cfg.C)))
        self.set_requires_grad(False)

    def __call__(self, prompt: Tensor) -> Tensor:
        """``[..., L, D]`` prompt tokens (``L <= n + 1``) -> ``[..., C]`` text embedding."""
        prompt = T.as_tensor(prompt)
        if prompt.ndim not in (2, 3) or prompt.shape[-1] != self.cfg.D or prompt.shape[-2] > self.length:
            raise DimensionError(
                f"text_encode expects [{self.length}, {self.cfg.D}] tokens, got {prompt.shape}"
            )
        squeeze = prompt.ndim == 2
        x = prompt.reshape(1, *prompt.shape) if squeeze else prompt
        x = x + self.pos[: x.shape[1]]
        for block in self.blocks:
            x = block(x)
        out = self.ln_final(x[:, -1, :]) @ self.proj
        return out.reshape(self.cfg.C) if squeeze else out
