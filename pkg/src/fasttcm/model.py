"""Full model assembly: encoders, bridge, and head, plus the offline text-embedding cache."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .bridge import (
    LanguagePromptGenerator,
    VisualPromptGenerator,
    aux_loss,
    bsm,
    condition_prompt,
    fuse,
    match,
    total_loss,
)
from .config import Config
from .encoders import ImageEncoder, TextEncoder, WordEmbedding, global_pool
from .head import SegHead, task_loss
from .nn import Module, param
from .serialize import read_container, write_container
from .tensor import Tensor

SECTION_OF_PREFIX = {
    "image_encoder": "encoders",
    "word_embed": "encoders",
    "text_encoder": "encoders",
    "prompts": "bridge",
    "mq": "bridge",
    "lg": "bridge",
    "vg": "bridge",
    "head": "head",
}


class CacheError(RuntimeError):
    pass


class FastTCM(Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        self.cfg = cfg
        enc, br = cfg.encoder, cfg.bridge
        seed = cfg.train.seed if seed is None else seed
        img_rng, head_rng, bridge_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
        )
        text_rng = np.random.default_rng(enc.text_seed)

        self.image_encoder = ImageEncoder(enc, img_rng)
        self.head = SegHead(enc.C, enc.s, head_rng)
        if br.use_bridge:
            self.word_embed = WordEmbedding(enc, text_rng)
            self.text_encoder = TextEncoder(enc, text_rng)
            if cfg.train.lr_factor_text > 0:
                self.text_encoder.set_requires_grad(True)
                self.word_embed.set_requires_grad(True)
            if enc.n:
                self.prompts = param(bridge_rng.normal(0.0, 0.5, size=(enc.n, enc.D)))
            if br.use_lg:
                self.mq = param(bridge_rng.normal(0.0, 1.0, size=(enc.C,)))
                self.lg = LanguagePromptGenerator(enc, bridge_rng, br.mode)
            if br.use_vg:
                self.vg = VisualPromptGenerator(enc, br, bridge_rng)

    # ------------------------------------------------------------------ text side

    def text_input(self) -> Tensor:
        """Learnable prompts followed by the embedded "Text" token."""
        parts = []
        if self.cfg.encoder.n:
            parts.append(self.prompts)
        if self.cfg.bridge.use_predefined:
            parts.append(self.word_embed("Text"))
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)

    def text_path(self, global_feature: Tensor | None = None) -> dict[str, Tensor]:
        br = self.cfg.bridge
        out = {"t_in": self.text_input()}
        t_hat_in = out["t_in"]
        if br.use_lg:
            if br.mode == "fast":
                out["cc"] = self.lg.generate_cc(self.mq)
            else:
                out["cc"] = self.lg.generate_cc_tcm(global_feature)
            t_hat_in = condition_prompt(out["cc"], out["t_in"])
        out["t_hat_in"] = t_hat_in
        out["t_out"] = self.text_encoder(t_hat_in)
        return out

    # ------------------------------------------------------------------ full pass

    def forward(self, images, text: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        """Run a batch ``[B, H, W, 3]``. Pass ``text`` to reuse a precomputed text path."""
        br = self.cfg.bridge
        out: dict[str, Tensor] = {}
        out["I"] = I = self.image_encoder(images)
        if not br.use_bridge:
            out["P"] = P = T.Tensor._wrap(np.zeros(I.shape[:-1] + (1,)))
            out["prob"] = self.head(I, P)
            return out
        out["I_bar"] = g = global_pool(I)
        if text is None:
            text = self.text_path(g)
        out.update(text)
        out["t_hat_out"] = t_hat = bsm(text["t_out"], g, br.use_bsm, br.bsm_gate)
        if br.use_vg:
            out["I_tilde"] = self.vg(I, t_hat)
            out["I_hat"] = fuse(I, out["I_tilde"])
        else:
            out["I_hat"] = I
        out["P"] = P = match(out["I_hat"], t_hat, br.tau)
        out["prob"] = self.head(out["I_hat"], P)
        return out

    __call__ = forward

    def losses(self, out: dict[str, Tensor], masks, coarse_masks) -> dict[str, Tensor]:
        br = self.cfg.bridge
        task = task_loss(out["prob"], masks)
        aux = aux_loss(out["P"], coarse_masks) if br.use_bridge and br.use_aux else None
        res = {"task": task, "total": total_loss(task, aux, br.lam, br.use_bridge and br.use_aux)}
        if aux is not None:
            res["aux"] = aux
        return res

    # ------------------------------------------------------------------ parameters

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters().items() if p.requires_grad}

    def sections(self) -> dict[str, dict[str, np.ndarray]]:
        out: dict[str, dict[str, np.ndarray]] = {"encoders": {}, "bridge": {}, "head": {}}
        for name, p in self.named_parameters().items():
            out[SECTION_OF_PREFIX[name.split(".")[0]]][name] = p.data.copy()
        return out

    def load_sections(self, sections: dict[str, dict[str, np.ndarray]]) -> None:
        params = self.named_parameters()
        seen = set()
        for records in (sections.get(k, {}) for k in ("encoders", "bridge", "head")):
            for name, arr in records.items():
                if name not in params:
                    raise KeyError(f"checkpoint tensor {name!r} has no matching parameter")
                if params[name].shape != arr.shape:
                    raise T.DimensionError(
                        f"checkpoint tensor {name!r}: {arr.shape} vs model {params[name].shape}"
                    )
                params[name].data[...] = arr
                seen.add(name)
        missing = set(params) - seen
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")

    def text_digest(self) -> str:
        """Digest of every tensor feeding the text path (prompts, cue network, text encoder)."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            if name.split(".")[0] in ("word_embed", "text_encoder", "prompts", "mq", "lg"):
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------- offline cache

CACHE_SECTION = "t_out_cache"


def precompute_text_path(model: FastTCM) -> np.ndarray:
    """Text embedding from the frozen meta-query path; image-independent in fast mode."""
    br = model.cfg.bridge
    if not br.use_bridge:
        raise CacheError("model has no text path")
    if br.mode != "fast":
        raise CacheError("tcm mode conditions the text path on each image; nothing to cache")
    with T.no_grad():
        return model.text_path()["t_out"].data.copy()


def save_text_cache(path: str | Path, model: FastTCM, t_out: np.ndarray | None = None) -> np.ndarray:
    if t_out is None:
        t_out = precompute_text_path(model)
    write_container(
        path,
        {CACHE_SECTION: {"t_out": t_out}},
        {"config_hash": model.cfg.model_hash(), "text_digest": model.text_digest()},
    )
    return t_out


def load_text_cache(path: str | Path, model: FastTCM) -> dict[str, Tensor]:
    sections, meta = read_container(path)
    if meta.get("config_hash") != model.cfg.model_hash():
        raise CacheError(
            f"cache config hash {meta.get('config_hash')} != model {model.cfg.model_hash()}"
        )
    if meta.get("text_digest") != model.text_digest():
        raise CacheError("cache was computed from different text-path weights")
    if CACHE_SECTION not in sections:
        raise CacheError(f"cache file lacks section {CACHE_SECTION!r}")
    return {"t_out": T.Tensor._wrap(sections[CACHE_SECTION]["t_out"])}


# ---------------------------------------------------------------------- gradient check


def loss_grad_check(cfg: Config, seed: int = 0, max_coords: int | None = None) -> float:
    """Finite-difference check of the total training loss on one synthetic sample.

    Every trainable tensor is probed; frozen tensors receive no gradient and are
    skipped, exactly as during training.
    """
    from .synthgen import downsample_mask, generate_sample

    model = FastTCM(cfg, seed=seed)
    sample = generate_sample(seed, cfg.synth, cfg.encoder.H, cfg.encoder.W)
    x, y = sample.image[None], sample.mask[None]
    yc = downsample_mask(y, cfg.encoder.s)
    return T.grad_check(lambda: model.losses(model(x), y, yc)["total"],
                        list(model.trainable().values()), max_coords=max_coords, seed=seed)
