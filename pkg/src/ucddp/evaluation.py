"""Victim training and unlearnability metrics.

A victim is a fresh classifier trained on released data with the true
labels. It never sees clusters, the derangement or the generator.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine as E
from .data import ImageDataset, ShardedBatches
from .ddp import DataParallel, WorldConfig
from .errors import ValidationError
from .models import FeatureHeadClassifier, MLPClassifier
from .pipeline import OptimConfig, _build

VICTIM_ARCHES = {"feature-head": FeatureHeadClassifier, "mlp": MLPClassifier}
RESULT_COLUMNS = ["dataset", "variant", "per_worker_batch", "global_batch", "seed", "accuracy", "steps"]


@dataclass
class TrainConfig:
    steps: int = 300
    arch: str = "feature-head"
    world: WorldConfig = field(default_factory=WorldConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.arch not in VICTIM_ARCHES:
            raise ValidationError(f"arch must be one of {sorted(VICTIM_ARCHES)}")

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "TrainConfig":
        return _build(cls, doc, {"world": WorldConfig, "optim": OptimConfig})


@dataclass
class EvalResult:
    dataset: str
    variant: str
    per_worker_batch: int
    global_batch: int
    seed: int
    accuracy: float
    steps: int

    def __post_init__(self):
        if self.variant not in ("clean", "poisoned"):
            raise ValidationError(f"variant must be clean or poisoned, got {self.variant!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")

    def row(self) -> list:
        return [self.dataset, self.variant, self.per_worker_batch, self.global_batch, self.seed, repr(float(self.accuracy)), self.steps]


def victim_loss(model, params, x, y) -> E.Tensor:
    _, logits = model.forward(x, params)
    return E.kl_div_batchmean(E.log_softmax(logits), E.one_hot(y, logits.shape[1], logits.dtype))


def train_victim(train: ImageDataset, cfg: TrainConfig, trace_sink=None):
    """Supervised training on ``train`` (true labels) inside the data-parallel harness."""
    if train.labels is None:
        raise ValidationError("victim training needs labelled data")
    seeds = np.random.SeedSequence([cfg.seed, 1]).generate_state(2)
    model = VICTIM_ARCHES[cfg.arch](train.shape, num_outputs=train.num_classes, seed=int(seeds[0]))
    if cfg.steps == 0:
        return model
    images, labels = train.images, train.labels
    schedule = cfg.optim.schedule(cfg.steps, cfg.world.global_batch)
    stream = ShardedBatches(len(train), cfg.world.world_size, cfg.world.per_worker_batch, seed=int(seeds[1]))

    def loss_fn(rank, params, idx):
        return victim_loss(model, params, images[idx], labels[idx])

    with DataParallel(model, cfg.world, cfg.optim.adam(), trace_sink, phase="victim") as ddp:
        for t in range(cfg.steps):
            ddp.step(stream.next(), loss_fn, schedule(t))
        return ddp.export()


def evaluate(model, test: ImageDataset) -> float:
    """Fraction of test images whose argmax logit equals the true label."""
    if test.labels is None:
        raise ValidationError("evaluation needs labelled data")
    if len(test) == 0:
        raise ValidationError("empty test set")
    pred = model.logits(test.images).argmax(axis=1)
    return float((pred == test.labels).mean())


def unlearnability_gap(clean_acc, poisoned_acc):
    """clean − poisoned accuracy; larger means stronger protection."""
    return clean_acc - poisoned_acc


def append_results(path, results) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow(r.row())
