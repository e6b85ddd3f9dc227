"""Pixel and region precision / recall / F-measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

IOU_THRESHOLD = 0.5
_EIGHT = np.ones((3, 3), dtype=int)


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _ratio(num: float, den: float, empty: float) -> float:
    return num / den if den > 0 else empty


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def prf(self) -> tuple[float, float, float]:
        # no positives anywhere and none predicted counts as perfect agreement
        empty = 1.0 if self.tp + self.fp + self.fn == 0 else 0.0
        p = _ratio(self.tp, self.tp + self.fp, empty)
        r = _ratio(self.tp, self.tp + self.fn, empty)
        return p, r, f_measure(p, r)


def pixel_counts(pred: np.ndarray, gt: np.ndarray) -> Counts:
    pred, gt = np.asarray(pred) > 0.5, np.asarray(gt) > 0.5
    return Counts(int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum()))


def region_counts(pred: np.ndarray, gt_regions: list[np.ndarray]) -> Counts:
    """Greedy one-to-one matching of predicted components to ground-truth masks at IoU >= 0.5."""
    labels, n_pred = ndimage.label(np.asarray(pred).reshape(pred.shape[0], pred.shape[1]) > 0.5, _EIGHT)
    preds = [labels == k for k in range(1, n_pred + 1)]
    pairs = []
    for i, pm in enumerate(preds):
        for j, gm in enumerate(gt_regions):
            inter = np.logical_and(pm, gm).sum()
            if inter:
                iou = inter / np.logical_or(pm, gm).sum()
                if iou >= IOU_THRESHOLD:
                    pairs.append((iou, i, j))
    used_p, used_g = set(), set()
    for _, i, j in sorted(pairs, key=lambda t: (-t[0], t[1], t[2])):
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    tp = len(used_p)
    return Counts(tp, n_pred - tp, len(gt_regions) - tp)


@dataclass
class EvalReport:
    pixel_precision: float
    pixel_recall: float
    pixel_f: float
    region_f: float
    loss: float

    def row(self, run: str) -> list:
        return [run, self.pixel_precision, self.pixel_recall, self.pixel_f, self.region_f]


def score_predictions(
    preds: np.ndarray, masks: np.ndarray, gt_regions: list[list[np.ndarray]], loss: float = 0.0
) -> EvalReport:
    """``preds`` and ``masks`` are binary ``[N, H, W, 1]``; ``gt_regions`` per-image region masks."""
    pix, reg = Counts(), Counts()
    for pred, mask, regions in zip(preds, masks, gt_regions):
        pix += pixel_counts(pred, mask)
        reg += region_counts(pred, regions)
    p, r, f = pix.prf()
    return EvalReport(p, r, f, reg.prf()[2], loss)
