"""Unlearnable Clusters: cluster, derange, co-train surrogate and generator, poison.

The surrogate and generator are trained cooperatively. In each round the
generator is frozen while the surrogate learns to predict the deranged
cluster label of noised images, then the surrogate is frozen while the
generator reshapes the cluster noise to make that prediction easier.
The resulting noise is an easy-to-learn shortcut that carries no
information about the true labels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine as E
from .clustering import ClusterAssignment, cluster_dataset
from .data import ImageDataset, ShardedBatches
from .ddp import DataParallel, WorldConfig
from .engine import CosineSchedule, Tensor
from .errors import ConfigurationError, ValidationError
from .models import DEFAULT_EPSILON, FeatureHeadClassifier, PerturbationModel, save_checkpoint


@dataclass
class OptimConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    lr_scaling: str = "fixed"  # "linear": lr_max *= global_batch / lr_ref_batch
    lr_ref_batch: int = 32

    def __post_init__(self):
        if self.lr_scaling not in ("fixed", "linear"):
            raise ValidationError("lr_scaling must be 'fixed' or 'linear'")
        if self.lr_max <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_max:
            raise ValidationError("need 0 < lr_min <= lr_max")

    def adam(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}

    def schedule(self, total_steps: int, global_batch: int) -> CosineSchedule:
        scale = global_batch / self.lr_ref_batch if self.lr_scaling == "linear" else 1.0
        return CosineSchedule(self.lr_max * scale, min(self.lr_min * scale, self.lr_max * scale), max(1, total_steps))


def _build(cls, doc: Optional[dict], nested: dict):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key, sub in nested.items():
        if key in doc and isinstance(doc[key], dict):
            doc[key] = sub(**doc[key])
    return cls(**doc)


@dataclass
class UCConfig:
    k: int = 8
    epsilon: float = DEFAULT_EPSILON
    rounds: int = 10
    surrogate_steps: int = 50
    generator_steps: int = 50
    lam: float = 0.0
    space: str = "pixel"
    world: WorldConfig = field(default_factory=WorldConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if min(self.rounds, self.surrogate_steps, self.generator_steps) < 1:
            raise ValidationError("rounds, surrogate_steps and generator_steps must be >= 1")
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        if not 0 < self.epsilon <= 1:
            raise ValidationError("epsilon must lie in (0, 1]")
        if self.k < 2:
            raise ValidationError("k must be >= 2")

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "UCConfig":
        return _build(cls, doc, {"world": WorldConfig, "optim": OptimConfig})

    def to_dict(self) -> dict:
        return asdict(self)

    def seeds(self) -> dict:
        s = np.random.SeedSequence(self.seed).generate_state(3)
        return {"surrogate": int(s[0]), "generator": int(s[1]), "data": int(s[2])}


@dataclass
class UCArtifacts:
    clusters: ClusterAssignment
    generator: PerturbationModel
    surrogate: FeatureHeadClassifier
    history: list  # one dict per round: round, surrogate_loss, generator_loss
    step_losses: dict  # phase -> list of per-step mean losses
    surrogate_accuracy: float

    def history_rows(self) -> list:
        rows = []
        for h in self.history:
            rows.append((h["round"], "surrogate", h["surrogate_loss"]))
            rows.append((h["round"], "generator", h["generator_loss"]))
        return rows

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "clusters": out / "clusters.json",
            "surrogate": out / "surrogate.ckpt",
            "generator": out / "generator.ckpt",
            "history": out / "history.csv",
        }
        self.clusters.save(paths["clusters"])
        save_checkpoint(self.surrogate, paths["surrogate"])
        save_checkpoint(self.generator, paths["generator"])
        with open(paths["history"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "phase", "mean_loss"])
            for r, phase, loss in self.history_rows():
                w.writerow([r, phase, repr(loss)])
        return paths


def build_clusters(ds: ImageDataset, cfg: UCConfig, surrogate=None) -> ClusterAssignment:
    if len(ds) < cfg.k:
        raise ValidationError(f"need at least k = {cfg.k} images, got {len(ds)}")
    return cluster_dataset(ds.without_labels(), cfg.k, seed=cfg.seed, space=cfg.space, surrogate=surrogate)


def uc_objective(
    surrogate: FeatureHeadClassifier,
    generator: PerturbationModel,
    x,
    cluster_ids,
    pi,
    lam: float = 0.0,
    centroid_feats=None,
    surrogate_params=None,
    generator_params=None,
) -> Tensor:
    """KL(onehot(pi[c]) || softmax(logits(x + δ_c))) + lam·mean‖feature − centroid_feat[pi[c]]‖²."""
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    if len(cluster_ids) == 0:
        raise ValidationError("uc_objective needs a nonempty batch")
    if lam > 0 and centroid_feats is None:
        raise ConfigurationError("lam > 0 requires per-cluster feature centroids")
    pi = np.asarray(pi, dtype=np.int64)
    deltas = generator.noise_all(generator_params)
    xt = x if isinstance(x, Tensor) else Tensor(E.as_array(x, deltas.dtype))
    poisoned = E.clamp(E.add(xt, E.take_rows(deltas, cluster_ids)), 0.0, 1.0)
    feature, logits = surrogate.forward(poisoned, surrogate_params)
    targets = pi[cluster_ids]
    loss = E.kl_div_batchmean(E.log_softmax(logits), E.one_hot(targets, logits.shape[1], logits.dtype))
    if lam > 0:
        anchor = np.asarray(centroid_feats, dtype=feature.dtype)[targets]
        align = E.mean_all(E.sum_rows(E.square(E.sub(feature, anchor))))
        loss = E.add(loss, E.mul(align, float(lam)))
    return loss


def cluster_feature_means(surrogate: FeatureHeadClassifier, images: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    feats = surrogate.features(images)
    out = np.zeros((k, feats.shape[1]), dtype=feats.dtype)
    for j in range(k):
        members = assign == j
        if members.any():
            out[j] = feats[members].mean(axis=0)
    return out


def poisoned_images(images: np.ndarray, assign: np.ndarray, generator: PerturbationModel) -> np.ndarray:
    deltas = generator.noise_all().data
    return np.clip(images + deltas[assign], 0.0, 1.0).astype(np.float32)


def train_uc(ds: ImageDataset, clusters: ClusterAssignment, cfg: UCConfig, trace_sink=None) -> UCArtifacts:
    """Alternate surrogate and generator phases for ``cfg.rounds`` rounds.

    Both models are trained data-parallel under ``cfg.world``; one cosine
    schedule spans all ``rounds * (surrogate_steps + generator_steps)`` steps.
    """
    if len(clusters.assign) != len(ds):
        raise ConfigurationError(f"cluster assignment covers {len(clusters.assign)} images, dataset has {len(ds)}")
    if clusters.k != cfg.k:
        raise ConfigurationError(f"cluster count {clusters.k} does not match config k = {cfg.k}")
    seeds = cfg.seeds()
    images = ds.images
    assign = clusters.assign
    surrogate = FeatureHeadClassifier(ds.shape, num_outputs=cfg.k, seed=seeds["surrogate"])
    generator = PerturbationModel(cfg.k, ds.shape, cfg.epsilon, seed=seeds["generator"])

    world = cfg.world
    total = cfg.rounds * (cfg.surrogate_steps + cfg.generator_steps)
    schedule = cfg.optim.schedule(total, world.global_batch)
    stream = ShardedBatches(len(ds), world.world_size, world.per_worker_batch, seed=seeds["data"])
    sur = DataParallel(surrogate, world, cfg.optim.adam(), trace_sink, phase="surrogate")
    gen = DataParallel(generator, world, cfg.optim.adam(), trace_sink, phase="generator")

    state = {"centroids": None}

    def surrogate_loss(rank, params, idx):
        return uc_objective(surrogate, generator, images[idx], assign[idx], clusters.pi, cfg.lam, state["centroids"], params, gen.replica(rank))

    def generator_loss(rank, params, idx):
        return uc_objective(surrogate, generator, images[idx], assign[idx], clusters.pi, cfg.lam, state["centroids"], sur.replica(rank), params)

    history = []
    step_losses = {"surrogate": [], "generator": []}
    t = 0
    try:
        for r in range(cfg.rounds):
            if cfg.lam > 0:
                current = sur.export()
                state["centroids"] = cluster_feature_means(current, images, assign, cfg.k)
            means = {}
            for phase, ddp, loss_fn, steps in (
                ("surrogate", sur, surrogate_loss, cfg.surrogate_steps),
                ("generator", gen, generator_loss, cfg.generator_steps),
            ):
                losses = []
                for _ in range(steps):
                    trace = ddp.step(stream.next(), loss_fn, schedule(t))
                    losses.append(float(np.mean(trace.losses)))
                    t += 1
                step_losses[phase].extend(losses)
                means[phase] = float(np.mean(losses))
            history.append({"round": r, "surrogate_loss": means["surrogate"], "generator_loss": means["generator"]})
    finally:
        sur.close()
        gen.close()

    surrogate = sur.export()
    generator = gen.export()
    poisoned = poisoned_images(images, assign, generator)
    acc = float((surrogate.logits(poisoned).argmax(axis=1) == clusters.targets).mean())
    return UCArtifacts(clusters, generator, surrogate, history, step_losses, acc)


def poison_dataset(ds: ImageDataset, clusters: ClusterAssignment, generator: PerturbationModel) -> ImageDataset:
    """Add each image's cluster noise and clip to [0, 1]; labels pass through untouched."""
    if len(clusters.assign) != len(ds):
        raise ConfigurationError("cluster assignment does not match dataset size")
    return ImageDataset(poisoned_images(ds.images, clusters.assign, generator), ds.labels, ds.name + "-poisoned", ds.num_classes)


def load_uc_config(path) -> UCConfig:
    doc = json.loads(Path(path).read_text())
    return UCConfig.from_dict(doc.get("uc", doc))
