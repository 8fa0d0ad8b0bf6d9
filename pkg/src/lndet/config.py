"""Experiment configuration: one JSON document, presets, flag overrides, hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .detmini.model import DetectorConfig
from .detmini.train import TrainConfig
from .errors import ConfigError
from .evalkit import EVAL_IOU, FP_THRESHOLDS
from .phantom import PhantomConfig
from .preprocess import PreprocessConfig
from .sampler import ClassicAugConfig, CompositionMode, ILLConfig, as_mode
from .wbf import WbfConfig


@dataclass(frozen=True)
class EvalConfig:
    iou_thr: float = EVAL_IOU
    fp_thresholds: tuple = FP_THRESHOLDS
    cv_folds: int = 1  # > 1: average metrics over hash folds of the test studies
    test_stride: int = 1  # stride over slices outside annotated extents

    def __post_init__(self):
        object.__setattr__(self, "fp_thresholds", tuple(float(f) for f in self.fp_thresholds))
        if not 0 < self.iou_thr <= 1:
            raise ConfigError("eval iou_thr must be in (0, 1]")
        if not self.fp_thresholds or any(f <= 0 for f in self.fp_thresholds):
            raise ConfigError("fp_thresholds must be positive")
        if list(self.fp_thresholds) != sorted(set(self.fp_thresholds)):
            raise ConfigError("fp_thresholds must be strictly increasing")
        if self.cv_folds < 1 or self.test_stride < 1:
            raise ConfigError("cv_folds and test_stride must be >= 1")


@dataclass(frozen=True)
class PathsConfig:
    data: Optional[str] = None  # existing dataset root; None generates the phantom set
    splits: tuple = (60, 10, 20)

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(int(v) for v in self.splits))
        if len(self.splits) != 3 or min(self.splits) < 1:
            raise ConfigError("splits must be three counts >= 1")


SECTIONS = {
    "ill": ILLConfig,
    "aug": ClassicAugConfig,
    "preprocess": PreprocessConfig,
    "detector": DetectorConfig,
    "train": TrainConfig,
    "wbf": WbfConfig,
    "eval": EvalConfig,
    "phantom": PhantomConfig,
    "paths": PathsConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: CompositionMode = CompositionMode.E_21
    ill: ILLConfig = field(default_factory=ILLConfig)
    aug: ClassicAugConfig = field(default_factory=ClassicAugConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    wbf: WbfConfig = field(default_factory=WbfConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    n_runs: int = 5
    seed: int = 0
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "mode", as_mode(self.mode))
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.ill.enabled and self.mode in (CompositionMode.E_T, CompositionMode.E_D):
            raise ConfigError(f"ILL needs two domains; mode {self.mode.value} has one")

    def to_dict(self):
        out = {"name": self.name, "mode": self.mode.value, "n_runs": self.n_runs, "seed": self.seed}
        for key in SECTIONS:
            out[key] = _plain(dataclasses.asdict(getattr(self, key)))
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def sha256(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, CompositionMode):
        return obj.value
    return obj


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"section for {cls.__name__} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None


def from_dict(d) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    top = {"name", "mode", "n_runs", "seed"}
    unknown = sorted(set(d) - top - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {k: d[k] for k in top if k in d}
    if "mode" in kw:
        try:
            kw["mode"] = as_mode(kw["mode"])
        except (ValueError, KeyError):
            raise ConfigError(f"unknown mode {kw['mode']!r}") from None
    for key, cls in SECTIONS.items():
        if key in d:
            kw[key] = _build(cls, d[key])
    return ExperimentConfig(**kw)


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


# Desk-scale settings shared by all presets (see README for why they differ
# from the detector/trainer defaults).
DESK = {
    "detector": {"anchor_scale": 3.0, "vfl_norm": "positives"},
    "train": {"learning_rate": 3e-3, "epochs": 20},
    "aug": {"crop_max_scale": 1.8},
}

PRESETS = {
    "et": {"mode": "E_T", "ill": {"enabled": False}},
    "ed": {"mode": "E_D", "ill": {"enabled": False}},
    "e12-nsa": {"mode": "E_12", "ill": {"enabled": False}},
    "e12-ill": {"mode": "E_12", "ill": {"enabled": True}},
    "e21-nsa": {"mode": "E_21", "ill": {"enabled": False}},
    "e21-ill": {"mode": "E_21", "ill": {"enabled": True}},
}


def preset_dict(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return merge(merge(DESK, PRESETS[name]), {"name": name})


def preset(name, **overrides) -> ExperimentConfig:
    return from_dict(merge(preset_dict(name), overrides))


def parse_override(text):
    """``section.key=value`` (value parsed as JSON, else kept as a string) -> nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"bad override key {key!r}")
        out = {part: out}
    return out


def load_config(path=None, preset_name=None, overrides=(), seed=None) -> ExperimentConfig:
    """Resolve preset, then JSON file, then ``--set`` overrides, then ``--seed``."""
    d = preset_dict(preset_name) if preset_name else {}
    if path is not None:
        try:
            with open(Path(path)) as fh:
                d = merge(d, json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for text in overrides:
        d = merge(d, parse_override(text))
    if seed is not None:
        d = merge(d, {"seed": int(seed)})
    return from_dict(d)
