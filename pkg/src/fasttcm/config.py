"""Configuration dataclasses and the flat key-value document they serialize to."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    preset: str = "desk"
    H: int = 64
    W: int = 64
    C: int = 64
    D: int = 32
    s: int = 8
    n: int = 4
    K: int = 1
    text_depth: int = 2
    text_heads: int = 2
    text_seed: int = 1234

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.K != 1:
            raise ConfigError("only a single text class (K=1) is supported")
        if self.s < 2 or self.s & (self.s - 1):
            raise ConfigError(f"downsampling ratio s={self.s} must be a power of two")
        if self.H % self.s or self.W % self.s:
            raise ConfigError(f"image size {self.H}x{self.W} not divisible by s={self.s}")
        if self.n < 0:
            raise ConfigError("prompt count n must be >= 0")
        if self.D % self.text_heads:
            raise ConfigError(f"D={self.D} not divisible by text_heads={self.text_heads}")
        if self.text_depth < 1:
            raise ConfigError("text_depth must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.s, self.W // self.s


@dataclass
class BridgeConfig:
    tau: float = 0.07
    lam: float = 1.0
    mode: str = "fast"
    use_bridge: bool = True
    use_predefined: bool = True
    use_lg: bool = True
    use_vg: bool = True
    use_aux: bool = True
    use_bsm: bool = True
    bsm_gate: str = "abs"
    vg_layers: int = 2
    vg_heads: int = 2
    vg_width: int = 32
    vg_ffn: int = 64

    def validate(self, enc: EncoderConfig) -> None:
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be > 0, got {self.tau}")
        if self.bsm_gate not in ("abs", "signed"):
            raise ConfigError(f"bsm_gate must be 'abs' or 'signed', got {self.bsm_gate!r}")
        if self.mode not in ("fast", "tcm"):
            raise ConfigError(f"mode must be 'fast' or 'tcm', got {self.mode!r}")
        if self.use_bridge and not self.use_predefined and enc.n == 0:
            raise ConfigError("text prompt is empty: need use_predefined or n > 0")
        if self.vg_width % self.vg_heads:
            raise ConfigError(f"vg_width={self.vg_width} not divisible by vg_heads={self.vg_heads}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    base_lr: float = 3e-3
    lr_factor_image: float = 0.1
    lr_factor_text: float = 0.0
    data_ratio: float = 1.0
    seed: int = 0
    ckpt_every: int = 500

    def validate(self) -> None:
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if not 0.0 < self.data_ratio <= 1.0:
            raise ConfigError(f"data_ratio must lie in (0, 1], got {self.data_ratio}")
        if self.base_lr < 0 or self.lr_factor_image < 0 or self.lr_factor_text < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class SynthConfig:
    max_regions: int = 3
    max_distractors: int = 3
    min_text_frac: float = 0.02
    max_text_frac: float = 0.40
    stripe_contrast: float = 0.7  # max |light - dark| per channel; min is a third of it
    noise_std: float = 0.45  # i.i.d. Gaussian pixel noise added last
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100
    data_seed: int = 7

    def validate(self) -> None:
        if self.max_regions < 0 or self.max_distractors < 0:
            raise ConfigError("region and distractor counts must be >= 0")
        if not 0.0 <= self.min_text_frac <= self.max_text_frac <= 1.0:
            raise ConfigError("need 0 <= min_text_frac <= max_text_frac <= 1")
        if self.noise_std < 0 or not 0.0 < self.stripe_contrast <= 1.0:
            raise ConfigError("need noise_std >= 0 and 0 < stripe_contrast <= 1")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")


@dataclass
class BenchConfig:
    warmup: int = 10
    iters: int = 100

    def validate(self) -> None:
        if self.warmup < 10 or self.iters < 100:
            raise ConfigError("benchmark needs warmup >= 10 and iters >= 100")


PRESETS: dict[str, dict[str, Any]] = {
    "desk": dict(C=64, D=32, s=8, n=4, text_heads=2, vg_layers=2, vg_heads=2, vg_width=32, vg_ffn=64),
    "paper": dict(
        C=1024, D=512, s=32, n=4, text_heads=8, vg_layers=6, vg_heads=4, vg_width=256, vg_ffn=1024
    ),
}

_SECTIONS = ("encoder", "bridge", "train", "synth", "bench")


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "Config":
        self.encoder.validate()
        self.bridge.validate(self.encoder)
        self.train.validate()
        self.synth.validate()
        self.bench.validate()
        return self

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for sec in _SECTIONS:
            flat.update(dataclasses.asdict(getattr(self, sec)))
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "Config":
        cfg = cls()
        flat = dict(flat)
        preset = flat.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            cfg.set("preset", preset)
            for key, val in PRESETS[preset].items():
                cfg.set(key, val)
        for key, val in flat.items():
            cfg.set(key, val)
        return cfg.validate()

    def set(self, key: str, value: Any) -> None:
        sec = _KEY_SECTION.get(key)
        if sec is None:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(self, sec)
        setattr(target, key, _coerce(_KEY_TYPE[key], value, key))

    def copy(self, **overrides: Any) -> "Config":
        cfg = Config()
        for key, val in {**self.to_flat(), **overrides}.items():
            cfg.set(key, val)
        return cfg.validate()

    def model_hash(self) -> str:
        """Hash of everything that determines model shapes and forward semantics."""
        doc = {"encoder": dataclasses.asdict(self.encoder), "bridge": dataclasses.asdict(self.bridge)}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        doc = {"H": self.encoder.H, "W": self.encoder.W, **dataclasses.asdict(self.synth)}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise ConfigError(f"{path}: config must be a flat key-value object")
        return cls.from_flat(doc)


_KEY_SECTION: dict[str, str] = {}
_KEY_TYPE: dict[str, type] = {}
for _sec, _cls in zip(_SECTIONS, (EncoderConfig, BridgeConfig, TrainConfig, SynthConfig, BenchConfig)):
    for _f in fields(_cls):
        assert _f.name not in _KEY_SECTION, _f.name
        _KEY_SECTION[_f.name] = _sec
        _KEY_TYPE[_f.name] = type(_f.default)


def _coerce(typ: type, value: Any, key: str) -> Any:
    try:
        if typ is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key} (expected {typ.__name__})") from None


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key.strip(), value.strip()
