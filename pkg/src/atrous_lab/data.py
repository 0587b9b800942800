"""Synthetic CT-like vessel slices and the 2D preprocessing pipeline.

A sample is generated in Hounsfield-like units, windowed to ``[0, 1]``, its
mask is cleaned of small components, and the slice is resized and copied to
three channels.  Shards are directories of TSR1 files plus a JSON index.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import tsr
from .boxes import BBoxPrompt
from .errors import ConfigError, FormatError, GenerationError, ValidationError
from .layers import bilinear_resize
from .tensor import Tensor

SHARD_SCHEMA = "atrous-lab/shard/v1"
INDEX_NAME = "shard.json"


@dataclass(frozen=True)
class WindowSpec:
    """CT display window: ``level`` is the centre, ``width`` the span, both in HU."""

    width: float = 400.0
    level: float = 40.0

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigError(f"window width must be positive, got {self.width}")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.level - self.width / 2, self.level + self.width / 2


def window_normalize(hu, w: WindowSpec = WindowSpec()) -> np.ndarray:
    """Map ``[level - width/2, level + width/2]`` linearly onto ``[0, 1]`` and clip."""
    hu = np.asarray(hu)
    lo, _ = w.bounds
    out = (hu - lo) / w.width
    return np.clip(out, 0.0, 1.0)


def remove_small_objects(mask, min_pixels: int) -> np.ndarray:
    """Drop 8-connected foreground components smaller than ``min_pixels``."""
    if min_pixels < 0:
        raise ConfigError(f"min_pixels must be >= 0, got {min_pixels}")
    m = np.asarray(mask)
    labels, n = ndimage.label(m != 0, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(m)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_pixels
    keep[0] = False
    return np.where(keep[labels], m, np.zeros_like(m))


def to_model_input(slice2d, target: int) -> np.ndarray:
    """Bilinear resize of a ``[S, S]`` slice to ``target`` and copy to three channels."""
    if target < 1:
        raise ConfigError(f"target size must be >= 1, got {target}")
    arr = np.asarray(slice2d)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D slice, got shape {arr.shape}")
    resized = bilinear_resize(Tensor(arr[None, None]), target, target).data[0, 0]
    return np.repeat(resized[None], 3, axis=0)


def resize_mask(mask, target: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape[0] == target:
        return m.copy()
    soft = bilinear_resize(Tensor(m[None, None].astype(np.float64)), target, target).data[0, 0]
    return (soft >= 0.5).astype(m.dtype)


def perturb_bbox(box: BBoxPrompt, max_shift: int, rng: np.random.Generator,
                 img_size: int, retries: int = 10) -> BBoxPrompt:
    """Jitter each coordinate by a uniform integer in ``[-max_shift, max_shift]``.

    The result is clipped to the image.  If every one of ``retries`` draws
    degenerates after clipping, the input box is returned unchanged.
    """
    if max_shift < 0:
        raise ConfigError(f"max_shift must be >= 0, got {max_shift}")
    if max_shift == 0:
        return box
    base = box.as_array()
    for _ in range(retries):
        c = np.clip(base + rng.integers(-max_shift, max_shift + 1, size=4), 0, img_size)
        if c[0] < c[2] and c[1] < c[3]:
            return BBoxPrompt.from_seq(c)
    return box


# ---------------------------------------------------------------------------
# generator

@dataclass
class SynthConfig:
    size: int = 64
    target: int | None = None
    vessels: tuple[int, int] = (1, 2)
    length: tuple[int, int] = (40, 80)
    turn_std: float = 0.15
    radius: tuple[float, float] = (2.0, 4.0)
    background_hu: float = 40.0
    contrast_hu: float = 200.0
    noise_std_hu: float = 20.0
    branch_prob: float = 0.3
    min_pixels: int = 8
    window: WindowSpec = field(default_factory=WindowSpec)

    @property
    def out_size(self) -> int:
        return self.target or self.size

    def validate(self) -> "SynthConfig":
        if self.radius[0] < 1 or self.radius[0] > self.radius[1]:
            raise ConfigError(f"radius range must satisfy 1 <= lo <= hi, got {self.radius}")
        if not 1 <= self.vessels[0] <= self.vessels[1]:
            raise ConfigError(f"vessel count range invalid: {self.vessels}")
        if not 2 <= self.length[0] <= self.length[1]:
            raise ConfigError(f"length range invalid: {self.length}")
        if not 0 <= self.branch_prob <= 1:
            raise ConfigError(f"branch_prob must lie in [0, 1], got {self.branch_prob}")
        if self.noise_std_hu < 0 or self.turn_std < 0 or self.min_pixels < 0:
            raise ConfigError("noise_std_hu, turn_std and min_pixels must be >= 0")
        if self.size < 1 or (self.target is not None and self.target < 1):
            raise ConfigError("size and target must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("vessels", "length", "radius"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "window" in d:
            d["window"] = WindowSpec(**d["window"])
        for key in ("vessels", "length", "radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def paper_synth_config() -> SynthConfig:
    """1024-pixel slices with the 100-pixel small-object threshold; geometry scaled by 16."""
    s = 1024 / 64
    base = SynthConfig()
    return SynthConfig(size=1024, length=(int(base.length[0] * s), int(base.length[1] * s)),
                       radius=(base.radius[0] * s, base.radius[1] * s), turn_std=base.turn_std / s,
                       min_pixels=100)


def area_bounds(cfg: SynthConfig) -> tuple[float, float]:
    """Analytic bounds on the foreground area of a generated mask.

    Any disk of radius ``r`` rasterised at pixel centres covers the disk of
    radius ``r - sqrt(2)/2``.  Each tube (at most one branch per vessel) lies
    in a ``(L + 2r + 1) x (2r + 1)`` swept strip.
    """
    r_lo, r_hi = cfg.radius
    lo = math.pi * max(r_lo - math.sqrt(0.5), 0.0) ** 2
    hi = 2 * cfg.vessels[1] * (2 * r_hi + 1) * (cfg.length[1] + 2 * r_hi + 1)
    return lo, min(hi, cfg.size ** 2)


@dataclass
class SegSample:
    image: np.ndarray
    mask: np.ndarray
    bbox: BBoxPrompt
    id: str
    seed: list[int] = field(default_factory=list)

    def validate(self) -> "SegSample":
        c, h, w = self.image.shape
        if c != 3 or h != w or self.mask.shape != (h, w):
            raise ValidationError(f"sample {self.id}: bad shapes {self.image.shape}, {self.mask.shape}")
        if not (self.image.min() >= 0 and self.image.max() <= 1):
            raise ValidationError(f"sample {self.id}: image values outside [0, 1]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError(f"sample {self.id}: mask not binary")
        self.bbox.validate(h)
        if not self.bbox.contains(self.mask):
            raise ValidationError(f"sample {self.id}: box {self.bbox} misses foreground")
        return self

    def same_as(self, other: "SegSample") -> bool:
        return (self.id == other.id and self.bbox == other.bbox and self.seed == other.seed
                and self.image.dtype == other.image.dtype and self.mask.dtype == other.mask.dtype
                and np.array_equal(self.image, other.image) and np.array_equal(self.mask, other.mask))


def _walk(rng: np.random.Generator, start: np.ndarray, angle: float, steps: int,
          turn_std: float, size: int) -> np.ndarray:
    """Unit-step random walk with smoothly drifting heading; stops at the border."""
    pts = [start]
    omega = 0.0
    pos = start.astype(float)
    for _ in range(steps - 1):
        omega = 0.8 * omega + rng.normal(0.0, turn_std)
        angle += omega
        pos = pos + np.array([math.sin(angle), math.cos(angle)])
        if not (0 <= pos[0] < size and 0 <= pos[1] < size):
            break
        pts.append(pos)
    return np.asarray(pts)


def _rasterise(canvas: np.ndarray, pts: np.ndarray, r0: float, r1: float) -> None:
    radii = np.linspace(r0, r1, len(pts))
    size = canvas.shape[0]
    for (cy, cx), r in zip(pts, radii):
        y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, size)
        x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, size)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _vessel_mask(cfg: SynthConfig, rng: np.random.Generator, attempts: int = 20) -> np.ndarray:
    size = cfg.size
    r_lo, r_hi = cfg.radius
    margin = r_hi + 1
    if size <= 2 * margin:
        raise GenerationError(f"image size {size} cannot hold a vessel of radius {r_hi}")
    mask = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(cfg.vessels[0], cfg.vessels[1] + 1))
    for _ in range(n):
        for _ in range(attempts):
            start = rng.uniform(margin, size - margin, size=2)
            steps = int(rng.integers(cfg.length[0], cfg.length[1] + 1))
            pts = _walk(rng, start, rng.uniform(0, 2 * math.pi), steps, cfg.turn_std, size)
            if len(pts) >= cfg.length[0] // 2:
                break
        else:
            raise GenerationError(f"no vessel of length >= {cfg.length[0] // 2} fits in {size} px")
        ra, rb = rng.uniform(r_lo, r_hi, size=2)
        _rasterise(mask, pts, ra, rb)
        if rng.random() < cfg.branch_prob and len(pts) > 4:
            at = int(rng.integers(1, len(pts) - 1))
            d = pts[at] - pts[at - 1]
            heading = math.atan2(d[0], d[1]) + rng.choice([-1, 1]) * rng.uniform(0.5, 1.2)
            sub = _walk(rng, pts[at], heading, max(steps // 2, 2), cfg.turn_std, size)
            rr = max(r_lo, 0.7 * min(ra, rb))
            _rasterise(mask, sub, rr, max(r_lo, 0.7 * rr))
    return mask


def generate_sample(cfg: SynthConfig, seed: int | Sequence[int], sample_id: str | None = None) -> SegSample:
    """One windowed, cleaned, model-ready vessel slice; deterministic in ``seed``."""
    cfg.validate()
    seed_list = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.default_rng(seed_list)
    mask = _vessel_mask(cfg, rng)
    hu = cfg.background_hu + cfg.contrast_hu * mask + rng.normal(0.0, cfg.noise_std_hu, mask.shape)
    slice01 = window_normalize(hu, cfg.window).astype(np.float32)
    mask = remove_small_objects(mask.astype(np.uint8), cfg.min_pixels)
    if not mask.any():
        raise GenerationError(f"seed {seed_list}: mask empty after small-object removal")
    image = to_model_input(slice01, cfg.out_size)
    mask = resize_mask(mask, cfg.out_size)
    sid = sample_id or "-".join(str(s) for s in seed_list)
    return SegSample(image, mask, BBoxPrompt.tight(mask), sid, seed_list).validate()


def generate_dataset(cfg: SynthConfig, count: int, seed: int) -> list[SegSample]:
    return [generate_sample(cfg, [seed, i], f"{i:05d}") for i in range(count)]


# ---------------------------------------------------------------------------
# shards

def write_shard(samples: Sequence[SegSample], path, cfg: SynthConfig | None = None) -> dict:
    """Write samples as TSR1 files plus ``shard.json``; returns the index."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        s.validate()
        tsr.save(root / f"img_{s.id}.tsr", s.image)
        tsr.save(root / f"mask_{s.id}.tsr", s.mask.astype(np.float32))
        entries.append({"id": s.id, "seed": list(s.seed), "bbox": s.bbox.to_list(),
                        "image": f"img_{s.id}.tsr", "mask": f"mask_{s.id}.tsr"})
    index = {
        "schema": SHARD_SCHEMA,
        "count": len(entries),
        "size": int(samples[0].mask.shape[0]) if samples else (cfg.out_size if cfg else None),
        "generator": cfg.to_dict() if cfg else None,
        "config_hash": cfg.digest() if cfg else None,
        "samples": entries,
    }
    tmp = root / (INDEX_NAME + ".tmp")
    tmp.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    tmp.replace(root / INDEX_NAME)
    return index


def read_index(path) -> dict:
    idx_path = Path(path) / INDEX_NAME
    if not idx_path.is_file():
        raise FormatError(f"{idx_path}: shard index not found")
    try:
        index = json.loads(idx_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{idx_path}: invalid JSON ({err.msg})", offset=err.pos) from None
    if not isinstance(index, dict) or index.get("schema") != SHARD_SCHEMA:
        raise FormatError(f"{idx_path}: expected schema {SHARD_SCHEMA!r}")
    return index


def read_shard(path) -> list[SegSample]:
    """Load every sample of a shard; any corrupt file aborts the whole read."""
    root = Path(path)
    index = read_index(root)
    out = []
    for e in index["samples"]:
        image = tsr.load(root / e["image"])
        mask = tsr.load(root / e["mask"])
        if image.ndim != 3 or image.shape[0] != 3 or mask.shape != image.shape[1:]:
            raise FormatError(f"{root}/{e['id']}: image {image.shape} and mask {mask.shape} disagree")
        sample = SegSample(image, mask.astype(np.uint8), BBoxPrompt.from_seq(e["bbox"]),
                           e["id"], list(e["seed"]))
        try:
            sample.validate()
        except ValidationError as err:
            raise FormatError(f"{root}: {err}") from None
        out.append(sample)
    return out


def stack(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray, list[BBoxPrompt]]:
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, 1, 1), np.float32)
    masks = np.stack([s.mask for s in samples]) if samples else np.zeros((0, 1, 1), np.uint8)
    return images, masks, [s.bbox for s in samples]
