"""Core domain types, box geometry and on-disk formats.

Volume directory::

    header.json   {"dims": [nx, ny, nz], "spacing_mm": [...], "origin_mm": [...],
                   "modality": "T2FS" | "DWI", "b_value": number | null}
    voxels.f32    raw little-endian float32, x fastest, z slowest

A study directory holds ``study.json`` plus one volume directory per series.
Images are indexed ``[x, y]`` and boxes are half-open pixel intervals
``(x_min, y_min, x_max, y_max)``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AnnotationError,
    CoregistrationError,
    DataError,
    HeaderError,
    MissingFileError,
    MissingModalityError,
    NonFiniteError,
    SizeMismatchError,
)

MODALITIES = ("T2FS", "DWI")
SPLITS = ("train", "val", "test")
VOXEL_DTYPE = np.dtype("<f4")


# ---------------------------------------------------------------- geometry


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def box_area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def check_box(box, strict=False):
    if len(box) != 4 or not all(math.isfinite(v) for v in box):
        raise AnnotationError(f"box must be 4 finite numbers, got {box!r}", field="box")
    if strict:
        ok = box[0] < box[2] and box[1] < box[3]
    else:
        ok = box[0] <= box[2] and box[1] <= box[3]
    if not ok:
        raise AnnotationError(f"box not well-ordered: {box!r}", field="box")
    return tuple(float(v) for v in box)


# ---------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid. ``data`` has shape (nx, ny, nz), dtype float32."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    modality: str = "T2FS"
    b_value: Optional[float] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise HeaderError(f"volume must be 3D with dims >= 1, got {data.shape}", field="dims")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("volume contains non-finite voxels", field="voxels")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise HeaderError(f"spacing must be 3 positive values, got {self.spacing}", field="spacing_mm")
        if self.modality not in MODALITIES:
            raise HeaderError(f"unknown modality {self.modality!r}", field="modality")
        if self.modality != "DWI" and self.b_value is not None:
            raise HeaderError("b_value only valid for DWI", field="b_value")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(s) for s in self.origin))

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxels(self) -> np.ndarray:
        """Flat x-fastest buffer."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, voxels, dims, **kw):
        voxels = np.asarray(voxels, dtype=np.float32)
        if voxels.size != int(np.prod(dims)):
            raise SizeMismatchError(
                f"voxel buffer has {voxels.size} values, dims {tuple(dims)} need {int(np.prod(dims))}",
                field="voxels")
        return cls(voxels.reshape(tuple(dims), order="F"), **kw)

    def with_data(self, data):
        return Volume(data, self.spacing, self.origin, self.modality, self.b_value)

    def same_grid(self, other: "Volume") -> bool:
        return (self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-6))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin
                and self.modality == other.modality and self.b_value == other.b_value
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True)
class BoxAnnotation:
    slice: int
    box: tuple
    sad_mm: Optional[float] = None
    lad_mm: Optional[float] = None
    is_3d_extent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "box", check_box(self.box, strict=True))
        object.__setattr__(self, "slice", int(self.slice))
        if self.sad_mm is not None and self.sad_mm < 3:
            raise AnnotationError(f"sad_mm {self.sad_mm} below the 3 mm inclusion floor", field="sad_mm")

    def to_json(self):
        return {"slice": self.slice, "box": list(self.box), "sad_mm": self.sad_mm,
                "lad_mm": self.lad_mm, "is_3d_extent": self.is_3d_extent}

    @classmethod
    def from_json(cls, d):
        try:
            return cls(slice=d["slice"], box=tuple(d["box"]), sad_mm=d.get("sad_mm"),
                       lad_mm=d.get("lad_mm"), is_3d_extent=bool(d.get("is_3d_extent", False)))
        except KeyError as exc:
            raise AnnotationError(f"annotation missing key {exc}", field=str(exc.args[0])) from None


@dataclass(frozen=True)
class Detection:
    slice: int
    box: tuple
    score: float
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "box", check_box(self.box))
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score {self.score} outside [0, 1]", field="score")

    def sort_key(self):
        """Descending score, ties by (slice, box) lexicographic."""
        return (-self.score, self.slice) + tuple(self.box)


@dataclass(frozen=True)
class Study:
    study_id: str
    series: tuple
    annotations: tuple = ()
    split: str = "train"
    series_names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}", field="split")
        if not any(v.modality == "T2FS" for v in self.series):
            raise MissingModalityError(f"study {self.study_id} has no T2FS series", field="series")
        ref = self.series[0]
        for v in self.series[1:]:
            if not v.same_grid(ref):
                raise CoregistrationError(
                    f"study {self.study_id}: series grids differ ({v.dims}/{v.spacing}/{v.origin} vs "
                    f"{ref.dims}/{ref.spacing}/{ref.origin})", field="series")
        nx, ny, nz = ref.dims
        for a in self.annotations:
            if not 0 <= a.slice < nz:
                raise AnnotationError(f"annotation slice {a.slice} outside [0, {nz})", field="slice")
            x0, y0, x1, y1 = a.box
            if x0 < 0 or y0 < 0 or x1 > nx or y1 > ny:
                raise AnnotationError(f"annotation box {a.box} outside image {nx}x{ny}", field="box")

    @property
    def dims(self):
        return self.series[0].dims

    @property
    def t2(self) -> Volume:
        return next(v for v in self.series if v.modality == "T2FS")

    def dwi(self, b_value=None) -> Volume:
        """DWI series with the given b-value, default the highest one."""
        dw = [v for v in self.series if v.modality == "DWI"]
        if not dw:
            raise MissingModalityError(f"study {self.study_id} has no DWI series", field="series")
        if b_value is not None:
            for v in dw:
                if v.b_value == b_value:
                    return v
            raise MissingModalityError(f"study {self.study_id} has no DWI b={b_value}", field="b_value")
        return max(dw, key=lambda v: -math.inf if v.b_value is None else v.b_value)

    def has(self, modality) -> bool:
        return any(v.modality == modality for v in self.series)

    def boxes_on(self, z):
        return [a.box for a in self.annotations if a.slice == z]

    def replace(self, **kw):
        d = dict(study_id=self.study_id, series=self.series, annotations=self.annotations,
                 split=self.split, series_names=self.series_names)
        d.update(kw)
        return Study(**d)


def slice_view(v: Volume, z: int) -> np.ndarray:
    """Copy of plane ``z`` as an (nx, ny) array indexed ``[x, y]``."""
    nz = v.dims[2]
    if not 0 <= z < nz:
        raise IndexError(f"slice {z} outside [0, {nz})")
    return np.array(v.data[:, :, z])


# ---------------------------------------------------------------- I/O


def _read_json(path: Path):
    if not path.is_file():
        raise MissingFileError(f"missing {path}", field=path.name)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise HeaderError(f"malformed JSON in {path}: {exc}", field=path.name) from None


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_volume(path) -> Volume:
    path = Path(path)
    hdr = _read_json(path / "header.json")
    for key in ("dims", "spacing_mm", "origin_mm", "modality"):
        if key not in hdr:
            raise HeaderError(f"header missing '{key}'", field=key)
    dims = hdr["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d >= 1 for d in dims)):
        raise HeaderError(f"dims must be three integers >= 1, got {dims!r}", field="dims")
    for key in ("spacing_mm", "origin_mm"):
        val = hdr[key]
        if not isinstance(val, list) or len(val) != 3:
            raise HeaderError(f"{key} must be a list of 3 numbers", field=key)
    raw = path / "voxels.f32"
    if not raw.is_file():
        raise MissingFileError(f"missing {raw}", field="voxels.f32")
    buf = np.fromfile(raw, dtype=VOXEL_DTYPE)
    if raw.stat().st_size % 4:
        raise SizeMismatchError(f"{raw} size is not a multiple of 4 bytes", field="voxels")
    if not np.all(np.isfinite(buf)):
        raise NonFiniteError(f"{raw} contains non-finite voxels", field="voxels")
    b_value = hdr.get("b_value")
    return Volume.from_flat(buf.astype(np.float32), dims, spacing=tuple(hdr["spacing_mm"]),
                            origin=tuple(hdr["origin_mm"]), modality=hdr["modality"],
                            b_value=None if b_value is None else float(b_value))


def save_volume(v: Volume, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    hdr = {"dims": list(v.dims), "spacing_mm": list(v.spacing), "origin_mm": list(v.origin),
           "modality": v.modality, "b_value": v.b_value}
    _write_json(path / "header.json", hdr)
    v.voxels.astype(VOXEL_DTYPE).tofile(path / "voxels.f32")


def series_dirname(v: Volume) -> str:
    if v.modality == "DWI":
        return "DWI" if v.b_value is None else f"DWI_b{int(round(v.b_value))}"
    return v.modality


def save_study(s: Study, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = list(s.series_names) if len(s.series_names) == len(s.series) else []
    if not names:
        for v in s.series:
            base = name = series_dirname(v)
            k = 1
            while name in names:
                k += 1
                name = f"{base}_{k}"
            names.append(name)
    for v, name in zip(s.series, names):
        save_volume(v, path / name)
    manifest = {"study_id": s.study_id, "split": s.split, "series": names,
                "annotations": [a.to_json() for a in s.annotations]}
    _write_json(path / "study.json", manifest)


def load_study(path) -> Study:
    path = Path(path)
    m = _read_json(path / "study.json")
    for key in ("study_id", "split", "series"):
        if key not in m:
            raise HeaderError(f"study.json missing '{key}'", field=key)
    series = tuple(load_volume(path / rel) for rel in m["series"])
    anns = tuple(BoxAnnotation.from_json(a) for a in m.get("annotations", []))
    return Study(study_id=str(m["study_id"]), series=series, annotations=anns,
                 split=m["split"], series_names=tuple(m["series"]))


def find_studies(root):
    """Study directories under ``root`` (``root`` itself if it is one), sorted."""
    root = Path(root)
    if (root / "study.json").is_file():
        return [root]
    found = sorted(p.parent for p in root.glob("*/study.json"))
    if not found:
        raise MissingFileError(f"no study.json found under {root}", field="study.json")
    return found


# ---------------------------------------------------------------- detections


def save_detections(path, study_id, source_id, dets, extra=None):
    items = [{"slice": d.slice, "box": [float(c) for c in d.box], "score": float(d.score)}
             for d in sorted(dets, key=Detection.sort_key)]
    doc = {"study_id": study_id, "source_id": source_id, "items": items}
    if extra:
        doc.update(extra)
    path = Path(path)
    if path.parent:
        os.makedirs(path.parent, exist_ok=True)
    _write_json(path, doc)


def load_detections(path):
    """Returns ``(study_id, source_id, [Detection], doc)``."""
    doc = _read_json(Path(path))
    for key in ("study_id", "source_id", "items"):
        if key not in doc:
            raise HeaderError(f"detections file missing '{key}'", field=key)
    src = str(doc["source_id"])
    dets = [Detection(int(it["slice"]), tuple(it["box"]), float(it["score"]), src) for it in doc["items"]]
    return str(doc["study_id"]), src, dets, doc
