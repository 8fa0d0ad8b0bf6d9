"""Minibatch training, checkpoint selection, inference and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..errors import ConfigError, DataError, NumericalFault
from ..sampler import (NO_AUG, ClassicAugConfig, ILLConfig, compose_25d, enumerate_keyslices,
                       make_rng, make_training_sample)
from ..volcore import Detection, Study
from .assign import Grid, atss_assign
from .model import (DetectorConfig, ModelParams, backward, decode, forward, init_params, loss_terms,
                    param_specs)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 12
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_keep: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_keep < 1:
            raise ConfigError("checkpoint_keep must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    val_loss: float
    train_loss: float = float("nan")
    source_id: str = ""


@dataclass
class TrainResult:
    checkpoints: List[Checkpoint]
    history: list = field(default_factory=list)
    diverged: bool = False


# ---------------------------------------------------------------- sample streams


class StudyStream:
    """Training stream over (study, key slice) items.

    Epoch ``e`` visits the items in a permutation drawn from ``(seed, e)``;
    item ``k`` of that epoch is built from ``(seed, e, k)`` so the stream does
    not depend on how work is split between workers.
    """

    def __init__(self, studies, mode, ill: ILLConfig = ILLConfig(), aug: ClassicAugConfig = NO_AUG,
                 seed=0, b_value=None):
        self.studies = list(studies)
        self.items = [(si, z) for si, s in enumerate(self.studies) for z in enumerate_keyslices(s)]
        self.mode, self.ill, self.aug, self.seed, self.b_value = mode, ill, aug, int(seed), b_value

    def __len__(self):
        return len(self.items)

    def epoch(self, e):
        order = make_rng(self.seed, e, 0x5EED).permutation(len(self.items))
        for k, idx in enumerate(order):
            si, z = self.items[idx]
            yield make_training_sample(self.studies[si], z, self.mode, self.ill, self.aug,
                                       make_rng(self.seed, e, k), b_value=self.b_value)


class ListStream:
    """A fixed list of samples, reshuffled every epoch."""

    def __init__(self, samples, seed=0, shuffle=True):
        self.samples = list(samples)
        self.seed, self.shuffle = int(seed), shuffle

    def __len__(self):
        return len(self.samples)

    def epoch(self, e):
        if not self.shuffle:
            return iter(self.samples)
        order = make_rng(self.seed, e, 0x5EED).permutation(len(self.samples))
        return (self.samples[i] for i in order)


def val_samples(studies, mode, b_value=None):
    return [compose_25d(s, z, mode, b_value) for s in studies for z in enumerate_keyslices(s)]


def _as_stream(data, seed, shuffle=True):
    if hasattr(data, "epoch"):
        return data
    return ListStream(data, seed, shuffle)


def make_targets(samples, dcfg: DetectorConfig):
    out = []
    for s in samples:
        nx, ny = s.shape
        grid = Grid.for_image(nx, ny, dcfg.feature_stride)
        out.append(atss_assign(s.boxes, grid, dcfg.anchor_scale, dcfg.atss_topk))
    return out


def _batches(it, size):
    buf = []
    for item in it:
        buf.append(item)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def evaluate_loss(params, samples, dcfg, targets=None, batch_size=16):
    samples = list(samples)
    if targets is None:
        targets = make_targets(samples, dcfg)
    total, count = 0.0, 0
    for k in range(0, len(samples), batch_size):
        xs = samples[k:k + batch_size]
        out = forward(params, xs, dcfg)
        _, per, _ = loss_terms(out, targets[k:k + batch_size], dcfg)
        total += float(per.sum())
        count += len(xs)
    return total / max(count, 1)


class Adam:
    def __init__(self, size, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat, grad):
        if self.wd:
            grad = grad + self.wd * flat
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGDMomentum:
    def __init__(self, size, lr, momentum=0.9, weight_decay=0.0):
        self.lr, self.mu, self.wd = lr, momentum, weight_decay
        self.buf = np.zeros(size)

    def step(self, flat, grad):
        if self.wd:
            grad = grad + self.wd * flat
        self.buf = self.mu * self.buf + grad
        flat -= self.lr * self.buf


def make_optimizer(tcfg: TrainConfig, size):
    if tcfg.optimizer == "adam":
        return Adam(size, tcfg.learning_rate, tcfg.betas, weight_decay=tcfg.weight_decay)
    return SGDMomentum(size, tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay)


def train(dataset, val, tcfg: TrainConfig, dcfg: DetectorConfig, params: Optional[ModelParams] = None,
          source_prefix="run") -> TrainResult:
    """Minibatch gradient descent; keeps the ``checkpoint_keep`` epochs with the
    lowest validation loss (ties go to the earlier epoch), sorted by val loss.

    A non-finite training loss stops training; the last finite parameters are
    kept as a checkpoint if none exists yet.
    """
    stream = _as_stream(dataset, tcfg.seed)
    val = list(val.epoch(0) if hasattr(val, "epoch") else val)
    if len(stream) == 0 or not val:
        raise DataError("training needs non-empty train and validation streams", field="dataset")
    val_targets = make_targets(val, dcfg)
    if params is None:
        params = init_params(dcfg, tcfg.seed)
    opt = make_optimizer(tcfg, params.size)
    kept: List[Checkpoint] = []
    history = []
    diverged = False
    for epoch in range(tcfg.epochs):
        losses = []
        for batch in _batches(stream.epoch(epoch), tcfg.batch_size):
            before = params.flat.copy()
            try:
                loss = backward(params, batch, make_targets(batch, dcfg), dcfg)
            except NumericalFault as exc:
                log.warning("epoch %d: %s; stopping", epoch, exc)
                loss = float("nan")
            if not math.isfinite(loss) or not np.all(np.isfinite(params.grad)):
                params.flat[:] = before
                diverged = True
                break
            opt.step(params.flat, params.grad)
            if not np.all(np.isfinite(params.flat)):
                params.flat[:] = before
                diverged = True
                break
            losses.append(loss)
        if diverged and not losses:
            break
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(params, val, dcfg, val_targets)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        ck = Checkpoint(params.copy(), epoch, val_loss, train_loss, f"{source_prefix}-e{epoch:02d}")
        kept = sorted(kept + [ck], key=lambda c: (c.val_loss, c.epoch))[: tcfg.checkpoint_keep]
        if diverged:
            break
    if not kept:
        val_loss = evaluate_loss(params, val, dcfg, val_targets)
        kept = [Checkpoint(params.copy(), -1, val_loss, float("nan"), f"{source_prefix}-init")]
    return TrainResult(kept, history, diverged)


# ---------------------------------------------------------------- inference


def predict(params: ModelParams, study: Study, mode, dcfg: DetectorConfig, source_id="model",
            b_value=None, test_stride=1, batch_size=16) -> List[Detection]:
    """Dense detections on every enumerated slice of ``study`` (no mixing)."""
    zs = enumerate_keyslices(study, test_stride)
    nx, ny, _ = study.dims
    dets = []
    for k in range(0, len(zs), batch_size):
        chunk = zs[k:k + batch_size]
        xs = np.stack([compose_25d(study, z, mode, b_value).channels for z in chunk])
        out = forward(params, xs, dcfg)
        for bi, z in enumerate(chunk):
            boxes, scores = decode(out, dcfg, (nx, ny), bi)
            for box, sc in zip(boxes, scores):
                if box[2] > box[0] and box[3] > box[1]:
                    dets.append(Detection(int(z), tuple(float(c) for c in box), float(sc), source_id))
    return dets


# ---------------------------------------------------------------- checkpoint files


def save_checkpoint(ck: Checkpoint, path, dcfg: DetectorConfig, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ck.params.flat.astype("<f4").tofile(path / "params.bin")
    meta = {"shapes": [[n, list(s)] for n, s in ck.params.specs], "config": dcfg.to_dict(),
            "val_loss": ck.val_loss, "train_loss": ck.train_loss, "epoch": ck.epoch,
            "source_id": ck.source_id}
    if extra:
        meta.update(extra)
    with open(path / "params.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(Checkpoint, DetectorConfig)``."""
    path = Path(path)
    for name in ("params.json", "params.bin"):
        if not (path / name).is_file():
            raise DataError(f"missing {path / name}", field=name)
    with open(path / "params.json") as fh:
        meta = json.load(fh)
    cfg_d = dict(meta["config"])
    cfg_d["channels"] = tuple(cfg_d["channels"])
    dcfg = DetectorConfig(**cfg_d)
    specs = [(n, tuple(s)) for n, s in meta["shapes"]]
    if specs != param_specs(dcfg):
        raise DataError("checkpoint shapes do not match its config", field="shapes")
    flat = np.fromfile(path / "params.bin", dtype="<f4").astype(np.float64)
    ck = Checkpoint(ModelParams(specs, flat), int(meta["epoch"]), float(meta["val_loss"]),
                    float(meta.get("train_loss", float("nan"))), str(meta.get("source_id", path.name)))
    return ck, dcfg
