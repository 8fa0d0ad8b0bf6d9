"""2.5D sample composition, Intra-Label LISA mixing and classic augmentation.

A sample stacks three consecutive slices (key slice in the middle) as
channels. The modality of each channel is fixed by the composition mode::

    E_T  = (T2FS, T2FS, T2FS)
    E_D  = (DWI,  DWI,  DWI)
    E_12 = (DWI,  T2FS, DWI)
    E_21 = (T2FS, DWI,  T2FS)

Intra-label mixing pairs a sample with the same slice triplet composed with
every channel's modality swapped, so both carry identical boxes, and blends
the two stacks with one shared ratio drawn from a Beta distribution.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, CoregistrationError, DataError, MissingModalityError
from .volcore import Study, slice_view


class CompositionMode(str, Enum):
    E_T = "E_T"
    E_D = "E_D"
    E_12 = "E_12"
    E_21 = "E_21"


PATTERNS = {
    CompositionMode.E_T: ("T2FS", "T2FS", "T2FS"),
    CompositionMode.E_D: ("DWI", "DWI", "DWI"),
    CompositionMode.E_12: ("DWI", "T2FS", "DWI"),
    CompositionMode.E_21: ("T2FS", "DWI", "T2FS"),
}
SWAP = {"T2FS": "DWI", "DWI": "T2FS"}
MIXED = "MIXED"


def as_mode(mode) -> CompositionMode:
    try:
        return CompositionMode(mode.value if isinstance(mode, CompositionMode) else str(mode).upper())
    except ValueError:
        raise ConfigError(f"unknown composition mode {mode!r}") from None


@dataclass(frozen=True, eq=False)
class Sample25D:
    channels: np.ndarray  # (3, nx, ny) float32
    key_slice: int
    channel_domains: tuple
    boxes: tuple
    study_id: str
    lambda_used: Optional[float] = None
    source_slices: tuple = ()
    mode: Optional[str] = None

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != 3:
            raise DataError(f"sample needs 3 channels of equal dims, got {ch.shape}", field="channels")
        nx, ny = ch.shape[1:]
        for b in self.boxes:
            if b[0] < 0 or b[1] < 0 or b[2] > nx or b[3] > ny:
                raise DataError(f"box {b} outside image {nx}x{ny}", field="boxes")
        if self.lambda_used is not None and not 0.0 <= self.lambda_used <= 1.0:
            raise DataError(f"lambda {self.lambda_used} outside [0, 1]", field="lambda_used")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "boxes", tuple(tuple(float(c) for c in b) for b in self.boxes))

    @property
    def shape(self):
        return self.channels.shape[1:]


@dataclass(frozen=True)
class ILLConfig:
    enabled: bool = False
    beta_alpha: float = 2.0
    beta_beta: float = 2.0
    apply_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.beta_alpha > 0 and self.beta_beta > 0):
            raise ConfigError("Beta parameters must be > 0")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob must be in [0, 1], got {self.apply_prob}")


@dataclass(frozen=True)
class ClassicAugConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    crop: bool = True
    crop_min_scale: float = 0.85
    crop_max_scale: float = 1.0  # > 1 lets the crop window exceed the image (zoom out)
    shift_px_max: float = 32.0
    rotate_deg_max: float = 10.0
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.shift_px_max <= 32:
            raise ConfigError(f"shift_px_max must be in [0, 32], got {self.shift_px_max}")
        if not 0 <= self.rotate_deg_max <= 10:
            raise ConfigError(f"rotate_deg_max must be in [0, 10], got {self.rotate_deg_max}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must be in [0, 1]")
        if not 0 < self.crop_min_scale <= 1:
            raise ConfigError("crop_min_scale must be in (0, 1]")
        if not 1 <= self.crop_max_scale <= 2:
            raise ConfigError("crop_max_scale must be in [1, 2]")
        for name in ("contrast_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        object.__setattr__(self, "contrast_range", tuple(self.contrast_range))
        object.__setattr__(self, "gamma_range", tuple(self.gamma_range))


NO_AUG = ClassicAugConfig(enabled=False)


def make_rng(*keys) -> np.random.Generator:
    """Generator keyed on integers, e.g. ``(seed, epoch, draw_index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF
                                                                       for k in keys])))


# ---------------------------------------------------------------- composition


def _volume_for(s: Study, modality, b_value=None):
    if modality == "T2FS":
        return s.t2
    return s.dwi(b_value)


def compose_pattern(s: Study, key_slice: int, pattern, b_value=None, mode=None):
    nz = s.dims[2]
    if not 0 <= key_slice < nz:
        raise IndexError(f"key slice {key_slice} outside [0, {nz})")
    for mod in set(pattern):
        if not s.has(mod):
            raise MissingModalityError(f"study {s.study_id} lacks {mod} needed for {mode or pattern}",
                                       field="series")
    zs = (max(key_slice - 1, 0), key_slice, min(key_slice + 1, nz - 1))
    ch = np.stack([slice_view(_volume_for(s, m, b_value), z) for m, z in zip(pattern, zs)])
    return Sample25D(ch, key_slice, tuple(pattern), tuple(s.boxes_on(key_slice)), s.study_id,
                     source_slices=zs, mode=None if mode is None else str(mode.value))


def compose_25d(s: Study, key_slice: int, mode, b_value=None) -> Sample25D:
    mode = as_mode(mode)
    return compose_pattern(s, key_slice, PATTERNS[mode], b_value, mode)


def compose_partner(s: Study, key_slice: int, mode, b_value=None) -> Sample25D:
    """Same slice triplet with every channel's modality swapped."""
    mode = as_mode(mode)
    return compose_pattern(s, key_slice, tuple(SWAP[m] for m in PATTERNS[mode]), b_value, mode)


# ---------------------------------------------------------------- mixing


def sample_lambda(cfg: ILLConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(cfg.beta_alpha, cfg.beta_beta))


def ill_mix(a: Sample25D, b: Sample25D, lam: float) -> Sample25D:
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"lambda {lam} outside [0, 1]", field="lambda")
    if a.channels.shape != b.channels.shape:
        raise DataError(f"cannot mix samples of shape {a.channels.shape} and {b.channels.shape}",
                        field="channels")
    if a.study_id != b.study_id or a.boxes != b.boxes:
        raise CoregistrationError("mixed samples must share study and boxes", field="boxes")
    mixed = lam * a.channels.astype(np.float64) + (1.0 - lam) * b.channels.astype(np.float64)
    return Sample25D(mixed.astype(np.float32), a.key_slice, (MIXED,) * 3, a.boxes, a.study_id,
                     lambda_used=float(lam), source_slices=a.source_slices, mode=a.mode)


# ---------------------------------------------------------------- classic augmentation


def _bilinear_clamped(img, sx, sy):
    """Sample ``img`` at continuous coords (pixel centers at i+0.5), clamping to the border."""
    nx, ny = img.shape
    u = np.clip(sx - 0.5, 0.0, nx - 1.0)
    v = np.clip(sy - 0.5, 0.0, ny - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), nx - 1)
    v0 = np.minimum(np.floor(v).astype(np.int64), ny - 1)
    u1 = np.minimum(u0 + 1, nx - 1)
    v1 = np.minimum(v0 + 1, ny - 1)
    fu = u - u0
    fv = v - v0
    return ((1 - fu) * (1 - fv) * img[u0, v0] + fu * (1 - fv) * img[u1, v0]
            + (1 - fu) * fv * img[u0, v1] + fu * fv * img[u1, v1])


def warp_affine(channels, mat, offset):
    """Resample so that output point p shows input point ``mat^-1 (p - offset)``."""
    nx, ny = channels.shape[1:]
    gx, gy = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5, indexing="ij")
    inv = np.linalg.inv(mat)
    px = gx - offset[0]
    py = gy - offset[1]
    sx = inv[0, 0] * px + inv[0, 1] * py
    sy = inv[1, 0] * px + inv[1, 1] * py
    return np.stack([_bilinear_clamped(c.astype(np.float64), sx, sy) for c in channels]).astype(np.float32)


def transform_boxes(boxes, mat, offset, shape, min_visible=0.25):
    nx, ny = shape
    out = []
    for b in boxes:
        corners = np.array([[b[0], b[1]], [b[2], b[1]], [b[0], b[3]], [b[2], b[3]]], dtype=np.float64)
        t = corners @ mat.T + np.asarray(offset)
        x0, y0 = t.min(axis=0)
        x1, y1 = t.max(axis=0)
        full = (x1 - x0) * (y1 - y0)
        cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
        cx1, cy1 = min(x1, float(nx)), min(y1, float(ny))
        if cx1 - cx0 < 1.0 or cy1 - cy0 < 1.0:
            continue
        if (cx1 - cx0) * (cy1 - cy0) < min_visible * full:
            continue
        out.append((float(cx0), float(cy0), float(cx1), float(cy1)))
    return tuple(out)


def draw_geometry(aug: ClassicAugConfig, shape, rng):
    """Random affine (matrix, offset) in pixel coordinates; identity when disabled."""
    nx, ny = shape
    mat = np.eye(2)
    if rng.random() < aug.flip_prob:
        mat = np.diag([-1.0, 1.0]) @ mat
    if rng.random() < aug.flip_prob:
        mat = np.diag([1.0, -1.0]) @ mat
    theta = math.radians(rng.uniform(-aug.rotate_deg_max, aug.rotate_deg_max))
    c, s = math.cos(theta), math.sin(theta)
    mat = np.array([[c, -s], [s, c]]) @ mat
    if aug.crop:
        zoom = 1.0 / rng.uniform(aug.crop_min_scale, aug.crop_max_scale)
        mat = zoom * mat
    shift = rng.uniform(-aug.shift_px_max, aug.shift_px_max, size=2)
    center = np.array([nx / 2.0, ny / 2.0])
    offset = center - mat @ center + shift
    return mat, offset


def classic_augment(sample: Sample25D, aug: ClassicAugConfig, rng) -> Sample25D:
    if not aug.enabled:
        return sample
    mat, offset = draw_geometry(aug, sample.shape, rng)
    cmul = rng.uniform(*aug.contrast_range)
    gamma = rng.uniform(*aug.gamma_range)
    if np.allclose(mat, np.eye(2), rtol=0, atol=0) and not np.any(offset):
        ch = sample.channels.astype(np.float64)
        boxes = sample.boxes
    else:
        ch = warp_affine(sample.channels, mat, offset).astype(np.float64)
        boxes = transform_boxes(sample.boxes, mat, offset, sample.shape)
    mean = ch.mean()
    ch = np.clip((ch - mean) * cmul + mean, 0.0, 1.0) ** gamma
    return replace(sample, channels=ch.astype(np.float32), boxes=boxes)


def flip_x(sample: Sample25D) -> Sample25D:
    """Deterministic horizontal flip: x -> nx - x for pixels and boxes."""
    nx, ny = sample.shape
    mat = np.diag([-1.0, 1.0])
    offset = np.array([float(nx), 0.0])
    return replace(sample, channels=warp_affine(sample.channels, mat, offset),
                   boxes=transform_boxes(sample.boxes, mat, offset, sample.shape))


def make_training_sample(s: Study, key_slice: int, mode, ill: ILLConfig, aug: ClassicAugConfig, rng,
                         b_value=None, lam=None) -> Sample25D:
    """Compose, optionally mix with the domain-swapped partner, then augment.

    ``lam`` overrides the Beta draw (the application coin is still tossed).
    """
    sample = compose_25d(s, key_slice, mode, b_value)
    if ill.enabled and rng.random() < ill.apply_prob:
        ratio = sample_lambda(ill, rng) if lam is None else float(lam)
        sample = ill_mix(sample, compose_partner(s, key_slice, mode, b_value), ratio)
    return classic_augment(sample, aug, rng)


def enumerate_keyslices(s: Study, test_stride: int = 1):
    if s.split in ("train", "val"):
        return sorted({a.slice for a in s.annotations})
    nz = s.dims[2]
    labeled = {a.slice for a in s.annotations if a.is_3d_extent}
    stride = max(int(test_stride), 1)
    return sorted(labeled | set(range(0, nz, stride)))


# ---------------------------------------------------------------- audit dumps


def dump_sample(sample: Sample25D, out_dir, stem):
    """Write the three channels as 8-bit PNGs plus a JSON sidecar."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ch in enumerate(sample.channels):
        img = (np.clip(ch, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).T  # rows = y
        p = out_dir / f"{stem}_c{i}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    meta = {"study_id": sample.study_id, "key_slice": sample.key_slice, "mode": sample.mode,
            "channel_domains": list(sample.channel_domains), "source_slices": list(sample.source_slices),
            "lambda_used": sample.lambda_used, "boxes": [list(b) for b in sample.boxes]}
    with open(out_dir / f"{stem}.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return paths
