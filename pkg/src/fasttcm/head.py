"""Minimal segmentation head and its task loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .bridge import bce, check_binary
from .nn import Linear, Module
from .tensor import DimensionError, Tensor

DICE_SMOOTH = 1.0


class SegHead(Module):
    """concat(fused, P) -> 1x1 conv to C/2 -> relu -> nearest x s -> 1x1 conv to 1 -> sigmoid."""

    def __init__(self, C: int, s: int, rng: np.random.Generator):
        self.s = s
        self.C = C
        self.reduce = Linear(rng, C + 1, C // 2)
        self.classify = Linear(rng, C // 2, 1)

    def __call__(self, fused: Tensor, P: Tensor) -> Tensor:
        fused, P = T.as_tensor(fused), T.as_tensor(P)
        if fused.shape[:-1] != P.shape[:-1] or P.shape[-1] != 1 or fused.shape[-1] != self.C:
            raise DimensionError(f"head_forward: fused {fused.shape} vs score map {P.shape}")
        x = T.relu(self.reduce(T.concat([fused, P], axis=-1)))
        # a 1x1 conv commutes with nearest upsampling; classify on the coarse grid
        return T.sigmoid(T.upsample_nearest(self.classify(x), self.s))


def dice_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """``1 - (2 sum(p g) + 1) / (sum p + sum g + 1)`` per image, averaged over the batch."""
    pred = T.as_tensor(pred)
    axes = (-3, -2, -1)
    inter = T.tsum(pred * gt, axis=axes)
    denom = T.tsum(pred, axis=axes) + gt.sum(axis=axes) + DICE_SMOOTH
    return T.mean(1.0 - (2.0 * inter + DICE_SMOOTH) / denom)


def task_loss(pred: Tensor, gt) -> Tensor:
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    check_binary(gt, "ground-truth mask")
    if gt.shape != T.as_tensor(pred).shape:
        raise DimensionError(f"task_loss: prediction {T.as_tensor(pred).shape} vs mask {gt.shape}")
    return bce(pred, gt) + dice_loss(pred, gt)
