"""Training loop, Adam with per-group learning rates, checkpoints, and evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config
from .metrics import EvalReport, score_predictions
from .model import FastTCM
from .serialize import read_container, write_container
from .synthgen import SynthDataset, downsample_mask

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss_total", "loss_task", "loss_aux"]


class TrainingDiverged(RuntimeError):
    pass


def lr_factor(name: str, cfg: Config) -> float:
    root = name.split(".")[0]
    if root == "image_encoder":
        return cfg.train.lr_factor_image
    if root in ("text_encoder", "word_embed"):
        return cfg.train.lr_factor_text
    return 1.0


class Adam:
    def __init__(self, params: dict[str, T.Tensor], lrs: dict[str, float],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            lr = self.lrs[name]
            if p.grad is None or lr == 0.0:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]


def make_optimizer(model: FastTCM, cfg: Config) -> Adam:
    params = model.trainable()
    return Adam(params, {k: cfg.train.base_lr * lr_factor(k, cfg) for k in params})


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: FastTCM, opt: Adam | None = None, step: int = 0) -> Path:
    sections = model.sections()
    sections["optimizer_state"] = opt.state() if opt is not None else {}
    meta = {
        "config_hash": model.cfg.model_hash(),
        "config": model.cfg.dumps(),
        "step": str(step),
    }
    write_container(path, sections, meta)
    return Path(path)


def load_checkpoint(path: str | Path) -> tuple[FastTCM, Adam, dict[str, str]]:
    sections, meta = read_container(path)
    cfg = Config.from_flat(json.loads(meta["config"]))
    if cfg.model_hash() != meta.get("config_hash"):
        raise ValueError(f"{path}: stored config does not match its config hash")
    model = FastTCM(cfg)
    model.load_sections(sections)
    opt = make_optimizer(model, cfg)
    if sections.get("optimizer_state"):
        opt.load_state(sections["optimizer_state"])
    return model, opt, meta


# ----------------------------------------------------------------------------
# training


def subsample_indices(n: int, ratio: float, seed: int) -> np.ndarray:
    """Prefix of a seed-shuffled index list holding ``round(ratio * n)`` items."""
    k = int(round(ratio * n))
    if k < 1:
        raise ValueError(f"data ratio {ratio} of {n} samples leaves no training data")
    return np.random.default_rng(seed).permutation(n)[:k]


@dataclass
class TrainResult:
    model: FastTCM
    optimizer: Adam
    losses: list[tuple[float, float, float | None]] = field(default_factory=list)
    checkpoint: Path | None = None


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield order[i : i + batch]


def train(cfg: Config, data: SynthDataset, out_dir: str | Path | None = None) -> TrainResult:
    """Train a fresh model. With ``out_dir`` set, write checkpoints and a CSV loss log there."""
    tc = cfg.train
    if len(data) == 0:
        raise ValueError("empty training split")
    if tc.data_ratio < 1.0:
        data = data.subset(subsample_indices(len(data), tc.data_ratio, tc.seed))
    coarse = downsample_mask(data.masks, cfg.encoder.s)

    model = FastTCM(cfg)
    opt = make_optimizer(model, cfg)
    result = TrainResult(model, opt)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xBA7C4]))
    batches = _batches(len(data), min(tc.batch, len(data)), rng)

    ckpt = log_fh = writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint.ftcm"
        save_checkpoint(ckpt, model, opt, 0)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
    try:
        for step in range(1, tc.steps + 1):
            idx = next(batches)
            out = model(data.images[idx])
            losses = model.losses(out, data.masks[idx], coarse[idx])
            total = losses["total"].item()
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; last good checkpoint: {ckpt}"
                )
            opt.zero_grad()
            T.backward(losses["total"])
            opt.step()
            aux = losses["aux"].item() if "aux" in losses else None
            result.losses.append((total, losses["task"].item(), aux))
            if writer is not None:
                writer.writerow([step, repr(total), repr(losses["task"].item()),
                                 "" if aux is None else repr(aux)])
                if step % tc.ckpt_every == 0 or step == tc.steps:
                    save_checkpoint(ckpt, model, opt, step)
            if step % 500 == 0:
                log.info("step %d loss %.4f", step, total)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.checkpoint = ckpt
    return result


# ----------------------------------------------------------------------------
# evaluation


def predict(model: FastTCM, images: np.ndarray, batch: int = 25, text=None) -> np.ndarray:
    probs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            probs.append(model(images[i : i + batch], text=text)["prob"].data)
    return np.concatenate(probs)


def evaluate(model: FastTCM, data: SynthDataset, batch: int = 25) -> EvalReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    cfg = model.cfg
    H, W = cfg.encoder.H, cfg.encoder.W
    coarse = downsample_mask(data.masks, cfg.encoder.s)
    probs, loss_sum = [], 0.0
    with T.no_grad():
        for i in range(0, len(data), batch):
            sl = slice(i, i + batch)
            out = model(data.images[sl])
            loss_sum += model.losses(out, data.masks[sl], coarse[sl])["total"].item() * len(
                data.images[sl]
            )
            probs.append(out["prob"].data)
    preds = np.concatenate(probs) > 0.5
    gt_regions = [[r.rasterize(H, W) for r in regs] for regs in data.regions]
    return score_predictions(preds, data.masks, gt_regions, loss_sum / len(data))
