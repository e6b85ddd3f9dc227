"""Cross-modal bridge between the encoders and the segmentation head.

Language side: a meta query (or, in ``tcm`` mode, the pooled image feature) is
turned into a conditional cue by a two-layer FFN and broadcast-added to the
prompt tokens.  Image side: the text embedding is gated by its cosine
similarity with the pooled image feature, cross-attended into the image
grid, and matched per position against the fused embedding.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import BridgeConfig, ConfigError, EncoderConfig
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from .tensor import DimensionError, Tensor

P_CLAMP = 1e-7


class ModeError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


class LabelError(ValueError):
    pass


class LanguagePromptGenerator(Module):
    """``cc = LN(relu(LN(x) W1 + b1)) W2 + b2`` with ``x`` the meta query or the pooled feature."""

    def __init__(self, enc: EncoderConfig, rng: np.random.Generator, mode: str = "fast"):
        C, D = enc.C, enc.D
        self.mode = mode
        self.ln1 = LayerNorm(C)
        self.W1 = param(rng.normal(0.0, math.sqrt(2.0 / C), size=(C, C)))
        self.b1 = param(np.zeros(C))
        self.ln2 = LayerNorm(C)
        self.W2 = param(rng.normal(0.0, 0.5 / math.sqrt(C), size=(C, D)))
        self.b2 = param(np.zeros(D))

    def _ffn(self, x: Tensor) -> Tensor:
        h = T.relu(self.ln1(x) @ self.W1 + self.b1)
        return self.ln2(h) @ self.W2 + self.b2

    def generate_cc(self, mq: Tensor) -> Tensor:
        if self.mode != "fast":
            raise ModeError("generate_cc needs fast mode; tcm mode conditions on the image")
        return self._ffn(mq)

    def generate_cc_tcm(self, global_feature: Tensor) -> Tensor:
        if self.mode != "tcm":
            raise ModeError("generate_cc_tcm needs tcm mode")
        return self._ffn(global_feature)


def condition_prompt(cc: Tensor, t_in: Tensor) -> Tensor:
    """Add ``cc`` (``[D]`` or ``[B, D]``) to every row of ``t_in`` (``[L, D]``)."""
    cc, t_in = T.as_tensor(cc), T.as_tensor(t_in)
    if cc.shape[-1] != t_in.shape[-1]:
        raise DimensionError(f"cue {cc.shape} does not match prompt {t_in.shape}")
    return cc.reshape(*cc.shape[:-1], 1, cc.shape[-1]) + t_in


def l2norm(x: Tensor) -> Tensor:
    return T.sqrt(T.tsum(x * x, axis=-1, keepdims=True))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    na, nb = l2norm(a), l2norm(b)
    if (na.data < 1e-12).any() or (nb.data < 1e-12).any():
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return T.tsum(a * b, axis=-1, keepdims=True) / (na * nb)


BSM_GATES = ("abs", "signed")


def bsm(t_out: Tensor, global_feature: Tensor, enabled: bool = True, gate: str = "abs") -> Tensor:
    """Gate the pooled image feature into the text embedding by their cosine similarity.

    ``gate="signed"`` computes ``sim * I_bar + t_out``.  The default ``"abs"``
    weights by ``|sim|``: the same value whenever ``sim >= 0``, while an image
    feature pointing opposite to the text cancels it instead of doubling it.
    """
    if not enabled:
        return t_out
    if gate not in BSM_GATES:
        raise ConfigError(f"bsm gate must be one of {BSM_GATES}, got {gate!r}")
    t_out, global_feature = T.as_tensor(t_out), T.as_tensor(global_feature)
    if t_out.shape[-1] != global_feature.shape[-1]:
        raise DimensionError(f"bsm: {t_out.shape} vs {global_feature.shape}")
    sim = cosine(global_feature, t_out)
    weight = T.absolute(sim) if gate == "abs" else sim
    return weight * global_feature + t_out


class DecoderLayer(Module):
    """Pre-norm decoder layer: self-attention over image queries, cross-attention to text, FFN."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, ffn: int):
        self.ln1 = LayerNorm(width)
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(rng, width, heads)
        self.ln3 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ffn(self.ln3(x))


class VisualPromptGenerator(Module):
    def __init__(self, enc: EncoderConfig, cfg: BridgeConfig, rng: np.random.Generator):
        self.C = enc.C
        self.q_in = Linear(rng, enc.C, cfg.vg_width)
        self.kv_in = Linear(rng, enc.C, cfg.vg_width)
        self.layers = [
            DecoderLayer(rng, cfg.vg_width, cfg.vg_heads, cfg.vg_ffn) for _ in range(cfg.vg_layers)
        ]
        self.ln_out = LayerNorm(cfg.vg_width)
        self.out = Linear(rng, cfg.vg_width, enc.C, scale=0.1)

    def __call__(self, image_emb: Tensor, text_emb: Tensor) -> Tensor:
        """Queries from ``[B, h, w, C]`` image positions, keys/values from ``[B, C]`` text."""
        image_emb, text_emb = T.as_tensor(image_emb), T.as_tensor(text_emb)
        squeeze = image_emb.ndim == 3
        if squeeze:
            image_emb = image_emb.reshape(1, *image_emb.shape)
            text_emb = text_emb.reshape(1, text_emb.shape[-1])
        b, h, w, c = image_emb.shape
        if c != self.C or text_emb.shape[-1] != self.C:
            raise DimensionError(f"visual_prompt: image {image_emb.shape}, text {text_emb.shape}")
        if text_emb.ndim == 1:
            text_emb = text_emb.reshape(1, c)
        if text_emb.shape[0] != b:
            text_emb = T.broadcast_to(text_emb, (b, c))
        x = self.q_in(image_emb.reshape(b, h * w, c))
        memory = self.kv_in(text_emb.reshape(b, 1, c))
        for layer in self.layers:
            x = layer(x, memory)
        out = self.out(self.ln_out(x)).reshape(b, h, w, c)
        return out.reshape(h, w, c) if squeeze else out


def fuse(image_emb: Tensor, visual_prompt: Tensor) -> Tensor:
    image_emb, visual_prompt = T.as_tensor(image_emb), T.as_tensor(visual_prompt)
    if image_emb.shape != visual_prompt.shape:
        raise DimensionError(f"fuse: {image_emb.shape} vs {visual_prompt.shape}")
    return image_emb + visual_prompt


def match(fused: Tensor, text_emb: Tensor, tau: float) -> Tensor:
    """Per-position ``sigmoid(<fused, text> / tau)`` -> ``[..., h, w, 1]``."""
    if not tau > 0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}")
    fused, text_emb = T.as_tensor(fused), T.as_tensor(text_emb)
    if fused.shape[-1] != text_emb.shape[-1]:
        raise DimensionError(f"match: {fused.shape} vs {text_emb.shape}")
    t = text_emb.reshape(*text_emb.shape[:-1], 1, 1, text_emb.shape[-1])
    logits = T.tsum(fused * t, axis=-1, keepdims=True) * (1.0 / tau)
    return T.sigmoid(logits)


def check_binary(y: np.ndarray, what: str = "labels") -> None:
    if not np.isin(y, (0.0, 1.0)).all():
        raise LabelError(f"{what} must be binary (0/1)")


def bce(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped away from 0 and 1."""
    p = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    y = T.as_tensor(y)
    return -T.mean(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))


def aux_loss(P: Tensor, y) -> Tensor:
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    check_binary(y)
    if y.shape != T.as_tensor(P).shape:
        raise DimensionError(f"aux_loss: P {T.as_tensor(P).shape} vs labels {y.shape}")
    return bce(P, y)


def total_loss(task: Tensor, aux: Tensor | None, lam: float, use_aux: bool = True) -> Tensor:
    if not use_aux or aux is None:
        return task
    return task + aux * lam
