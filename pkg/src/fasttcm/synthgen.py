"""Deterministic synthetic text-region images with exact masks.

Text regions are rotated rectangles filled with fine alternating stripes;
distractors are solid rectangles of similar size.  Telling them apart needs
texture, not intensity.  Files on disk use binary PPM (image), binary PGM
(mask) and a plain-text region sidecar.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import Config, SynthConfig
from .serialize import FormatError

MAX_TRIES = 100
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}
SPLIT_STRIDE = 1_000_000


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Region:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        pts = []
        for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            u, v = du * self.w / 2, dv * self.h / 2
            pts.append((self.cx + u * c - v * s, self.cy + u * s + v * c))
        return np.array(pts)

    def local_coords(self, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates along the region's long (u) and short (v) axes."""
        ys, xs = np.mgrid[0:H, 0:W] + 0.5
        dx, dy = xs - self.cx, ys - self.cy
        c, s = math.cos(self.theta), math.sin(self.theta)
        return dx * c + dy * s, -dx * s + dy * c

    def rasterize(self, H: int, W: int) -> np.ndarray:
        u, v = self.local_coords(H, W)
        return (u >= -self.w / 2) & (u < self.w / 2) & (v >= -self.h / 2) & (v < self.h / 2)

    def inside(self, H: int, W: int) -> bool:
        pts = self.corners()
        return bool((pts[:, 0] >= 0).all() and (pts[:, 0] <= W).all()
                    and (pts[:, 1] >= 0).all() and (pts[:, 1] <= H).all())


@dataclass
class SynthSample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    mask: np.ndarray  # [H, W, 1] in {0, 1}
    regions: list[Region]
    seed: int


def rasterize_regions(regions: list[Region], H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    for r in regions:
        mask |= r.rasterize(H, W)
    return mask


def _random_region(rng: np.random.Generator, H: int, W: int) -> Region:
    w = rng.uniform(0.22, 0.6) * W
    h = rng.uniform(0.1, 0.22) * H
    theta = 0.0 if rng.uniform() < 0.5 else rng.uniform(-math.pi / 3, math.pi / 3)
    return Region(float(rng.uniform(0, W)), float(rng.uniform(0, H)), float(w), float(h), float(theta))


def _place_text_regions(rng, count: int, H: int, W: int) -> list[Region]:
    regions: list[Region] = []
    occupied = np.zeros((H, W), dtype=bool)
    for _ in range(count):
        for _ in range(MAX_TRIES):
            r = _random_region(rng, H, W)
            if not r.inside(H, W):
                continue
            m = r.rasterize(H, W)
            # keep a gap so every region stays its own connected component
            if (m & ndimage.binary_dilation(occupied, iterations=2)).any():
                continue
            regions.append(r)
            occupied |= m
            break
        else:
            raise PlacementError(f"could not place text region {len(regions) + 1} in {MAX_TRIES} tries")
    return regions


def _background(rng, H: int, W: int, amp: float = 0.15) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    low = rng.normal(0.0, amp, size=(5, 5, 3))
    smooth = ndimage.zoom(low, (H / 5, W / 5, 1), order=1, mode="nearest")[:H, :W]
    return base + smooth


def generate_sample(seed: int, cfg: SynthConfig, H: int, W: int) -> SynthSample:
    rng = np.random.default_rng(seed)
    image = _background(rng, H, W)

    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        r = _random_region(rng, H, W)
        image[r.rasterize(H, W)] = rng.uniform(0.0, 1.0, size=3)

    regions: list[Region] = []
    if cfg.max_regions > 0:
        for attempt in range(MAX_TRIES):
            count = int(rng.integers(1, cfg.max_regions + 1))
            regions = _place_text_regions(rng, count, H, W)
            frac = rasterize_regions(regions, H, W).mean()
            if cfg.min_text_frac <= frac <= cfg.max_text_frac:
                break
        else:
            raise PlacementError("text coverage outside the configured range after retries")

    for r in regions:
        u, _ = r.local_coords(H, W)
        inside = r.rasterize(H, W)
        period = int(rng.integers(2, 5))
        mid = rng.uniform(0.3, 0.7, size=3)
        half = rng.uniform(cfg.stripe_contrast / 3, cfg.stripe_contrast, size=3) / 2
        dark, light = mid - half, mid + half
        if rng.uniform() < 0.5:
            dark, light = light, dark
        on = np.mod(np.floor(u + r.w / 2), period) < period / 2
        image[inside & on] = dark
        image[inside & ~on] = light

    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    mask = rasterize_regions(regions, H, W).astype(np.float64)[..., None]
    return SynthSample(np.clip(image, 0.0, 1.0), mask, regions, seed)


def downsample_mask(mask: np.ndarray, s: int) -> np.ndarray:
    """Block-max pooling of ``[..., H, W, 1]``: a coarse cell is 1 if any pixel in it is."""
    *lead, H, W, c = mask.shape
    if H % s or W % s:
        raise ValueError(f"mask {H}x{W} not divisible by {s}")
    return mask.reshape(*lead, H // s, s, W // s, s, c).max(axis=(-4, -2))


# ----------------------------------------------------------------------------
# PPM / PGM


def _encode_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    H, W = arr.shape[:2]
    return magic + f"\n{W} {H}\n255\n".encode() + arr.astype(np.uint8).tobytes()


def _decode_pnm(raw: bytes, magic: bytes, channels: int, what: str) -> np.ndarray:
    if raw[:2] != magic:
        raise FormatError(f"{what}: expected magic {magic!r} at byte 0, got {raw[:2]!r}")
    pos, fields_ = 2, []
    while len(fields_) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{what}: malformed header at byte {start}")
        fields_.append(int(raw[start:pos]))
    W, H, maxval = fields_
    if maxval != 255:
        raise FormatError(f"{what}: unsupported maxval {maxval} at byte {pos}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{what}: missing header terminator at byte {pos}")
    pos += 1
    need = W * H * channels
    if len(raw) - pos != need:
        raise FormatError(f"{what}: payload at byte {pos} has {len(raw) - pos} bytes, expected {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(H, W, channels)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(_encode_pnm(b"P6", np.round(np.clip(image, 0, 1) * 255)))


def read_ppm(path: str | Path) -> np.ndarray:
    return _decode_pnm(Path(path).read_bytes(), b"P6", 3, str(path)).astype(np.float64) / 255.0


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an 8-bit ``[H, W]`` or ``[H, W, 1]`` array of integers in 0..255."""
    Path(path).write_bytes(_encode_pnm(b"P5", np.asarray(gray).reshape(gray.shape[0], gray.shape[1])))


def read_pgm(path: str | Path) -> np.ndarray:
    return _decode_pnm(Path(path).read_bytes(), b"P5", 1, str(path))


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_pgm(path, (mask > 0.5).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.float64)


def write_regions(path: str | Path, regions: list[Region]) -> None:
    lines = [" ".join(repr(float(v)) for v in (r.cx, r.cy, r.w, r.h, r.theta)) for r in regions]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_regions(path: str | Path) -> list[Region]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 numbers, got {len(parts)}")
        out.append(Region(*map(float, parts)))
    return out


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    split: str
    count: int
    seed_base: int
    config_hash: str

    @classmethod
    def for_split(cls, cfg: Config, split: str) -> "DatasetManifest":
        if split not in SPLIT_OFFSETS:
            raise ValueError(f"unknown split {split!r}")
        count = {"train": cfg.synth.n_train, "val": cfg.synth.n_val, "test": cfg.synth.n_test}[split]
        if count >= SPLIT_STRIDE:
            raise ValueError(f"split size {count} exceeds the per-split seed range")
        seed_base = cfg.synth.data_seed * 10 * SPLIT_STRIDE + SPLIT_OFFSETS[split]
        return cls(split, count, seed_base, cfg.data_hash())

    def seeds(self) -> range:
        return range(self.seed_base, self.seed_base + self.count)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    images: np.ndarray  # [N, H, W, 3]
    masks: np.ndarray  # [N, H, W, 1]
    regions: list[list[Region]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "SynthDataset":
        idx = np.asarray(indices, dtype=int)
        return SynthDataset(
            self.manifest, self.images[idx], self.masks[idx], [self.regions[i] for i in idx]
        )


def _collate(manifest: DatasetManifest, samples: list[SynthSample], H: int, W: int) -> SynthDataset:
    return SynthDataset(
        manifest,
        np.stack([s.image for s in samples]) if samples else np.zeros((0, H, W, 3)),
        np.stack([s.mask for s in samples]) if samples else np.zeros((0, H, W, 1)),
        [s.regions for s in samples],
    )


def build_dataset(cfg: Config, split: str) -> SynthDataset:
    manifest = DatasetManifest.for_split(cfg, split)
    H, W = cfg.encoder.H, cfg.encoder.W
    return _collate(manifest, [generate_sample(seed, cfg.synth, H, W) for seed in manifest.seeds()], H, W)


def write_dataset(root: str | Path, cfg: Config, split: str) -> DatasetManifest:
    manifest = DatasetManifest.for_split(cfg, split)
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    for index, seed in enumerate(manifest.seeds()):
        s = generate_sample(seed, cfg.synth, cfg.encoder.H, cfg.encoder.W)
        write_ppm(out / f"{index:06d}.ppm", s.image)
        write_mask(out / f"{index:06d}.pgm", s.mask)
        write_regions(out / f"{index:06d}.regions", s.regions)
    manifest.save(out / "manifest.json")
    return manifest


def read_sample(root: str | Path, split: str, index: int) -> SynthSample:
    d = Path(root) / split
    manifest = DatasetManifest.load(d / "manifest.json")
    if not 0 <= index < manifest.count:
        raise IndexError(f"sample {index} outside split of {manifest.count}")
    return SynthSample(
        read_ppm(d / f"{index:06d}.ppm"),
        read_mask(d / f"{index:06d}.pgm")[..., :1],
        read_regions(d / f"{index:06d}.regions"),
        manifest.seed_base + index,
    )


def read_dataset(root: str | Path, split: str) -> SynthDataset:
    manifest = DatasetManifest.load(Path(root) / split / "manifest.json")
    samples = [read_sample(root, split, i) for i in range(manifest.count)]
    H, W = samples[0].image.shape[:2] if samples else (0, 0)
    return _collate(manifest, samples, H, W)
