"""Synthetic co-registered T2FS/DWI studies with ellipsoidal nodes.

One geometry per study is rendered twice:

* T2FS-like: textured tissue with organs, bright tubular vessels running
  along z (node look-alikes that are dark on DWI) and sharp bright nodes.
* DWI-like: suppressed background, bright diffuse organ blobs (node
  look-alikes that are unremarkable on T2FS), bright nodes, all blurred.

Node voxels on T2FS are set to the local background median plus
``t2_node_contrast`` (plus non-negative texture), so every annotation box is
at least that much brighter than its surroundings.

Test studies get ``domain_shift`` applied to their DWI series: node contrast
drops, background texture and blobs strengthen, and a global gain/offset is
applied. Only the global part is undone by intensity normalization.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError
from .volcore import BoxAnnotation, Study, Volume, save_study

WINDOW_PX = 4


@dataclass(frozen=True)
class PhantomConfig:
    n_studies: int = 90
    dims: tuple = (96, 96, 16)
    spacing_mm: tuple = (1.0, 1.0, 4.0)
    nodes_per_study: tuple = (1, 4)
    node_sad_mm: tuple = (6.0, 12.0)
    node_axis_ratio: tuple = (1.0, 2.0)
    node_z_ratio: tuple = (1.5, 2.5)
    background_texture: float = 2.0
    background_noise: float = 0.06
    t2_node_contrast: float = 0.3
    dwi_node_contrast: float = 0.5
    dwi_blur_sigma: float = 1.2
    vessels_per_study: tuple = (2, 5)
    dwi_blobs_per_study: tuple = (1, 3)
    bias_field_amp: float = 0.1
    domain_shift: float = 0.5
    b_values: tuple = (800.0,)
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing_mm", "nodes_per_study", "node_sad_mm", "node_axis_ratio",
                     "node_z_ratio", "vessels_per_study", "dwi_blobs_per_study", "b_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        nx, ny, nz = self.dims
        if nx < 32 or ny < 32 or nz < 1:
            raise ConfigError("phantom dims must be >= 32 in-plane and >= 1 along z")
        if min(self.spacing_mm) <= 0:
            raise ConfigError("spacing must be positive")
        if self.node_sad_mm[0] < 3 or self.node_sad_mm[0] > self.node_sad_mm[1]:
            raise ConfigError("node SAD range must start at >= 3 mm")
        lo, hi = self.nodes_per_study
        if not 0 <= lo <= hi:
            raise ConfigError("nodes_per_study must be an increasing non-negative range")
        if min(self.background_texture, self.background_noise, self.dwi_blur_sigma,
               self.bias_field_amp, self.domain_shift) < 0:
            raise ConfigError("sigmas, amplitudes and domain_shift must be >= 0")
        if not self.b_values:
            raise ConfigError("need at least one DWI b-value")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Node:
    center_mm: tuple
    semi_mm: tuple  # (x, y, z)

    @property
    def sad_mm(self):
        return 2.0 * min(self.semi_mm[0], self.semi_mm[1])

    @property
    def lad_mm(self):
        return 2.0 * max(self.semi_mm[0], self.semi_mm[1])


def _rng(seed, index, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index), stream])))


def _coords(cfg):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing_mm
    x = (np.arange(nx) + 0.5) * sx
    y = (np.arange(ny) + 0.5) * sy
    z = (np.arange(nz) + 0.5) * sz
    return np.meshgrid(x, y, z, indexing="ij")


def node_mask(node: Node, cfg):
    X, Y, Z = _coords(cfg)
    (cx, cy, cz), (a, b, c) = node.center_mm, node.semi_mm
    return ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 + ((Z - cz) / c) ** 2 <= 1.0


def _smooth_noise(rng, shape, sigma):
    n = rng.standard_normal(shape)
    if sigma > 0:
        n = gaussian_filter(n, sigma=(sigma, sigma, 0.5 * sigma), mode="wrap")
        n /= n.std() + 1e-12
    return n


def _bias_field(rng, cfg):
    X, Y, Z = _coords(cfg)
    ex = np.array(cfg.dims) * np.array(cfg.spacing_mm)
    k = rng.uniform(0.5, 1.5, size=3) * 2 * math.pi / ex
    ph = rng.uniform(0, 2 * math.pi, size=3)
    f = np.sin(k[0] * X + ph[0]) * np.cos(k[1] * Y + ph[1]) + 0.5 * np.sin(k[2] * Z + ph[2])
    return 1.0 + cfg.bias_field_amp * f / 1.5


def _place_nodes(rng, cfg, max_tries=200):
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing_mm
    n_nodes = int(rng.integers(cfg.nodes_per_study[0], cfg.nodes_per_study[1] + 1))
    nodes = []
    for _ in range(n_nodes):
        for _try in range(max_tries):
            sad = rng.uniform(*cfg.node_sad_mm)
            ratio = rng.uniform(*cfg.node_axis_ratio)
            a, b = sad / 2.0, sad / 2.0 * ratio
            if rng.random() < 0.5:
                a, b = b, a
            c = sad / 2.0 * rng.uniform(*cfg.node_z_ratio)
            margin_x = a + (WINDOW_PX + 4) * sx
            margin_y = b + (WINDOW_PX + 4) * sy
            if 2 * margin_x >= nx * sx or 2 * margin_y >= ny * sy:
                continue
            cx = rng.uniform(margin_x, nx * sx - margin_x)
            cy = rng.uniform(margin_y, ny * sy - margin_y)
            kz = int(rng.integers(0, nz))
            cz = (kz + 0.5 + rng.uniform(-0.25, 0.25)) * sz
            cand = Node((cx, cy, cz), (a, b, c))
            ok = True
            for o in nodes:
                gap_x = abs(cx - o.center_mm[0]) - a - o.semi_mm[0]
                gap_y = abs(cy - o.center_mm[1]) - b - o.semi_mm[1]
                if max(gap_x / sx, gap_y / sy) < 2 * WINDOW_PX + 2:
                    ok = False
                    break
            if ok:
                nodes.append(cand)
                break
        else:
            raise DataError(f"could not place node {len(nodes) + 1} after {max_tries} tries; "
                            "config too crowded", field="nodes_per_study")
    return nodes


def _slice_boxes(mask):
    """{z: (x0, y0, x1, y1)} tight half-open boxes of a 3D mask, per slice."""
    out = {}
    for z in range(mask.shape[2]):
        xs, ys = np.nonzero(mask[:, :, z])
        if len(xs):
            out[z] = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
    return out


def _cross_section_mm(node: Node, z_mm):
    dz = (z_mm - node.center_mm[2]) / node.semi_mm[2]
    if abs(dz) >= 1:
        return 0.0, 0.0
    f = math.sqrt(1.0 - dz * dz)
    a, b = node.semi_mm[0] * f, node.semi_mm[1] * f
    return 2 * min(a, b), 2 * max(a, b)


def _window(box, nx, ny):
    x0, y0, x1, y1 = (int(v) for v in box)
    return (max(x0 - WINDOW_PX, 0), max(y0 - WINDOW_PX, 0), min(x1 + WINDOW_PX, nx), min(y1 + WINDOW_PX, ny))


def local_background_median(img2d, box):
    """Median of the window around ``box`` (``WINDOW_PX`` margin), box excluded."""
    nx, ny = img2d.shape
    wx0, wy0, wx1, wy1 = _window(box, nx, ny)
    keep = np.ones((wx1 - wx0, wy1 - wy0), dtype=bool)
    x0, y0, x1, y1 = (int(v) for v in box)
    keep[x0 - wx0:x1 - wx0, y0 - wy0:y1 - wy0] = False
    return float(np.median(img2d[wx0:wx1, wy0:wy1][keep]))


def _ellipsoids(rng, cfg, count_range, radius_px, z_extent):
    """Random ellipsoid masks, used for organs, vessels and DWI blobs."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing_mm
    X, Y, Z = _coords(cfg)
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    masks = []
    for _ in range(count):
        r = rng.uniform(*radius_px)
        cx, cy = rng.uniform(0.15, 0.85) * nx * sx, rng.uniform(0.15, 0.85) * ny * sy
        cz = rng.uniform(0, nz) * sz
        rz = z_extent * nz * sz if z_extent else r * sx
        rx, ry = r * sx * rng.uniform(0.8, 1.25), r * sy * rng.uniform(0.8, 1.25)
        masks.append(((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 + ((Z - cz) / rz) ** 2 <= 1.0)
    return masks


def generate_study(cfg: PhantomConfig, index: int, split="train", out_dir=None) -> Study:
    """Deterministic study ``index``; written to ``out_dir/<study_id>`` if given."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing_mm
    geo = _rng(cfg.seed, index, 1)
    tex = _rng(cfg.seed, index, 2)
    nodes = _place_nodes(geo, cfg)

    X, Y, _ = _coords(cfg)
    ex, ey = nx * sx, ny * sy
    body = ((X - ex / 2) / (0.47 * ex)) ** 2 + ((Y - ey / 2) / (0.45 * ey)) ** 2 <= 1.0
    organs = _ellipsoids(geo, cfg, (2, 3), (10, 22), 0.6)
    vessels = _ellipsoids(geo, cfg, cfg.vessels_per_study, (1.0, 2.2), 0.8)
    blobs = _ellipsoids(geo, cfg, cfg.dwi_blobs_per_study, (3.0, 7.0), 0.0)
    organ_level = geo.uniform(-0.12, 0.15, size=len(organs))

    # --- T2FS
    texture = _smooth_noise(tex, cfg.dims, cfg.background_texture)
    t2 = np.where(body, 0.4, 0.03)
    for m, lvl in zip(organs, organ_level):
        t2 = np.where(m & body, 0.4 + lvl, t2)
    for m in blobs:
        t2 = np.where(m & body, t2 + 0.05, t2)
    t2 = t2 + body * 0.07 * texture
    for m in vessels:
        t2 = np.where(m & body, 0.4 + cfg.t2_node_contrast * geo.uniform(0.9, 1.3), t2)
    t2 = t2 * _bias_field(tex, cfg)
    t2 = t2 + cfg.background_noise * tex.standard_normal(cfg.dims)

    masks = [node_mask(n, cfg) for n in nodes]
    for m in masks:
        for z, box in _slice_boxes(m).items():
            med = local_background_median(t2[:, :, z], box)
            sl = m[:, :, z]
            t2[:, :, z][sl] = med + cfg.t2_node_contrast + 0.03 * np.abs(tex.standard_normal(int(sl.sum())))

    # --- DWI, one series per b-value; higher b brightens nodes relative to background
    shift = cfg.domain_shift if split == "test" else 0.0
    dwi_series = []
    bmax = max(cfg.b_values)
    for bv in cfg.b_values:
        brel = bv / bmax if bmax > 0 else 1.0
        dtex = _smooth_noise(tex, cfg.dims, cfg.background_texture)
        dwi = np.where(body, 0.15, 0.02) + body * 0.04 * (1 + 2 * shift) * dtex
        for m, lvl in zip(organs, organ_level):
            dwi = np.where(m & body, dwi + 0.3 * max(lvl, 0.0), dwi)
        for m in blobs:
            dwi = np.where(m & body, dwi + cfg.dwi_node_contrast * (0.9 + 0.5 * shift) * brel, dwi)
        for m in masks:
            dwi = np.where(m, dwi + cfg.dwi_node_contrast * (1 - 0.6 * shift) * brel, dwi)
        if cfg.dwi_blur_sigma > 0:
            dwi = gaussian_filter(dwi, sigma=(cfg.dwi_blur_sigma, cfg.dwi_blur_sigma, 0), mode="nearest")
        dwi = dwi * _bias_field(tex, cfg)
        dwi = dwi + 0.5 * cfg.background_noise * (1 + shift) * tex.standard_normal(cfg.dims)
        dwi = (1 + shift) * dwi + 0.1 * shift
        dwi_series.append(Volume(dwi.astype(np.float32), cfg.spacing_mm, (0.0, 0.0, 0.0), "DWI", float(bv)))

    # --- annotations
    anns = []
    for node, m in zip(nodes, masks):
        boxes = _slice_boxes(m)
        if not boxes:
            continue
        if split == "test":
            for z, box in sorted(boxes.items()):
                sad, lad = _cross_section_mm(node, (z + 0.5) * sz)
                if sad >= 3.0:
                    anns.append(BoxAnnotation(z, box, sad_mm=sad, lad_mm=lad, is_3d_extent=True))
        else:
            areas = {z: int(m[:, :, z].sum()) for z in boxes}
            key = max(sorted(boxes), key=lambda z: (areas[z], -abs((z + 0.5) * sz - node.center_mm[2])))
            anns.append(BoxAnnotation(key, boxes[key], sad_mm=node.sad_mm, lad_mm=node.lad_mm))

    t2v = Volume(t2.astype(np.float32), cfg.spacing_mm, (0.0, 0.0, 0.0), "T2FS")
    study = Study(f"ph{index:04d}", (t2v, *dwi_series), tuple(anns), split)
    if out_dir is not None:
        save_study(study, Path(out_dir) / study.study_id)
    return study


def split_counts(n, fractions=(0.69, 0.08, 0.23)):
    n_val = max(1, int(round(n * fractions[1])))
    n_test = max(1, int(round(n * fractions[2])))
    return (n - n_val - n_test, n_val, n_test)


def generate_dataset(cfg: PhantomConfig, splits=None, out_dir=None):
    """Generate train/val/test studies in index order; returns ``{split: [Study]}``.

    Writes ``dataset.json`` listing the study ids per split when ``out_dir`` is given.
    """
    splits = split_counts(cfg.n_studies) if splits is None else tuple(splits)
    if len(splits) != 3 or min(splits) < 1:
        raise ConfigError(f"need three split counts >= 1, got {splits}")
    out = {"train": [], "val": [], "test": []}
    index = 0
    for name, count in zip(("train", "val", "test"), splits):
        for _ in range(count):
            out[name].append(generate_study(cfg, index, name, out_dir))
            index += 1
    if out_dir is not None:
        manifest = {"config": cfg.to_dict(), "splits": {k: [s.study_id for s in v] for k, v in out.items()}}
        with open(Path(out_dir) / "dataset.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return out
