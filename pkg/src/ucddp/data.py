"""Image datasets: IDX files, synthetic blobs, and per-worker shard plans."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageDataset:
    """N images as float32 ``[N, C, H, W]`` in [0, 1], optionally labelled."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "dataset"
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValidationError(f"labels length {self.labels.shape} does not match N={len(self.images)}")
            if self.labels.size and self.labels.min() < 0:
                raise ValidationError("labels must be non-negative")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
            elif self.labels.size and self.labels.max() >= self.num_classes:
                raise ValidationError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def without_labels(self) -> "ImageDataset":
        return ImageDataset(self.images, None, self.name)

    def with_images(self, images: np.ndarray, name: Optional[str] = None) -> "ImageDataset":
        return replace(self, images=images, name=name or self.name)


# --------------------------------------------------------------------- IDX


def _read_header(buf: bytes, count: int, path, kind: str) -> tuple:
    need = 4 * count
    if len(buf) < need:
        raise ParseError(f"{path}: truncated {kind} header ({len(buf)} bytes, need {need})")
    return struct.unpack(">" + "I" * count, buf[:need])


def load_idx(images_path, labels_path=None, name: Optional[str] = None) -> ImageDataset:
    """Read an IDX3 image file (and optional IDX1 label file) into [0,1] floats."""
    images_path = Path(images_path)
    raw = images_path.read_bytes()
    magic, n, h, w = _read_header(raw, 4, images_path, "image")
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"{images_path}: bad magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})")
    body = raw[16:]
    if len(body) != n * h * w:
        raise ParseError(f"{images_path}: pixel payload has {len(body)} bytes, header N*H*W = {n * h * w}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w)
    images = pixels.astype(np.float32) / np.float32(255.0)

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        lraw = labels_path.read_bytes()
        lmagic, ln = _read_header(lraw, 2, labels_path, "label")
        if lmagic != IDX_LABELS_MAGIC:
            raise ParseError(f"{labels_path}: bad magic 0x{lmagic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})")
        if len(lraw) - 8 != ln:
            raise ParseError(f"{labels_path}: label payload has {len(lraw) - 8} bytes, header N = {ln}")
        if ln != n:
            raise ParseError(f"{labels_path}: N = {ln} does not match image file N = {n}")
        labels = np.frombuffer(lraw[8:], dtype=np.uint8).astype(np.int64)
    return ImageDataset(images, labels, name or images_path.stem)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_idx(ds: ImageDataset, images_path, labels_path=None) -> None:
    """Write images (single channel) as IDX3 bytes, rounding to 1/255 steps."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValidationError(f"IDX stores single-channel images, got C={c}")
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + quantize(ds.images).tobytes())
    if labels_path is not None:
        if ds.labels is None:
            raise ValidationError("dataset has no labels to write")
        if ds.labels.max(initial=0) > 255:
            raise ValidationError("IDX labels are single bytes; label > 255")
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# ------------------------------------------------------------- synthetic


def class_patterns(classes: int, dims=(1, 16, 16)) -> np.ndarray:
    """Disjoint (hence orthogonal) 0/1 masks, one per class, as [classes, C, H, W].

    Pixels are dealt to classes in contiguous row-major runs.
    """
    size = int(np.prod(dims))
    if classes < 1 or classes > size:
        raise ValidationError(f"cannot build {classes} disjoint patterns over {size} pixels")
    owner = (np.arange(size) * classes) // size
    masks = (owner[None, :] == np.arange(classes)[:, None]).astype(np.float32)
    return masks.reshape(classes, *dims)


def synth_blobs(
    n_per_class: int,
    classes: int = 2,
    dims=(1, 16, 16),
    margin: float = 0.5,
    sigma: float = 0.05,
    seed: int = 0,
    name: str = "blobs",
) -> ImageDataset:
    """Gaussian blobs around fixed orthogonal class means.

    Class ``c`` has mean ``base + margin * mask_c`` with ``base = (1 - margin)/2``,
    so each class is brighter by ``margin`` on its own pixel block. Samples
    are clipped to [0, 1] and returned in a seeded random order.
    """
    if not margin > 0:
        raise ValidationError(f"margin must be > 0, got {margin}")
    if margin > 1:
        raise ValidationError(f"margin {margin} does not fit in [0, 1]")
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    dims = tuple(int(d) for d in dims)
    means = (1.0 - margin) / 2.0 + margin * class_patterns(classes, dims)

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    noise = rng.standard_normal((len(labels), *dims)) * sigma
    images = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return ImageDataset(images[order], labels[order], name, num_classes=classes)


def nearest_mean_accuracy(train: ImageDataset, test: ImageDataset) -> float:
    """Accuracy of the classifier that picks the closest class mean of ``train``."""
    flat_tr = train.images.reshape(len(train), -1).astype(np.float64)
    flat_te = test.images.reshape(len(test), -1).astype(np.float64)
    means = np.stack([flat_tr[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((flat_te[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == test.labels).mean())


# ---------------------------------------------------------------- shards


@dataclass
class ShardPlan:
    world_size: int
    epoch_seed: int
    shards: list = field(default_factory=list)
    n: int = 0

    @property
    def shard_len(self) -> int:
        return len(self.shards[0]) if self.shards else 0


def shard_indices(n: int, world_size: int, epoch_seed: int = 0, shuffle: bool = True) -> ShardPlan:
    """Deal a (seeded) permutation of ``range(n)`` round-robin to ``world_size`` ranks.

    Shards are padded to ``ceil(n / world_size)`` by wrapping around to the
    start of the permutation.
    """
    if world_size < 1:
        raise ValidationError("world_size must be >= 1")
    if n < 1:
        raise ValidationError("n must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(n) if shuffle else np.arange(n)
    per_rank = math.ceil(n / world_size)
    total = per_rank * world_size
    extended = np.resize(perm, total)  # np.resize repeats from the start
    shards = [extended[r::world_size].copy() for r in range(world_size)]
    return ShardPlan(world_size, epoch_seed, shards, n)


class ShardedBatches:
    """Endless per-rank batch stream over successive epochs.

    Epoch ``e`` uses ``shard_indices(n, W, seed + e)``. Each rank reads its
    shard sequentially and rolls into the next epoch's shard mid-batch when
    needed, so with ``n % W == 0`` the union of rank batches at step ``t``
    equals the single-rank batch of size ``W*B`` at step ``t``.
    """

    def __init__(self, n: int, world_size: int, per_worker_batch: int, seed: int = 0, shuffle: bool = True):
        if per_worker_batch < 1:
            raise ValidationError("per_worker_batch must be >= 1")
        self.n = n
        self.world_size = world_size
        self.batch = per_worker_batch
        self.seed = seed
        self.shuffle = shuffle
        self._epoch = -1
        self._buffers = [np.empty(0, dtype=np.int64) for _ in range(world_size)]

    def _refill(self):
        self._epoch += 1
        plan = shard_indices(self.n, self.world_size, self.seed + self._epoch, self.shuffle)
        self._buffers = [np.concatenate([buf, s]) for buf, s in zip(self._buffers, plan.shards)]

    def next(self) -> list:
        while len(self._buffers[0]) < self.batch:
            self._refill()
        out = [buf[: self.batch] for buf in self._buffers]
        self._buffers = [buf[self.batch :] for buf in self._buffers]
        return out

    def __iter__(self):
        while True:
            yield self.next()


def load_dataset(spec: dict):
    """Build ``(train, test)`` from a dataset document.

    ``{"kind": "synth", n_per_class, classes, dims, margin, sigma, seed, test_n_per_class}``
    or ``{"kind": "idx", train_images, train_labels, test_images, test_labels}``.
    """
    spec = dict(spec or {"kind": "synth"})
    kind = spec.pop("kind", "synth")
    if kind == "synth":
        seed = int(spec.pop("seed", 0))
        test_n = int(spec.pop("test_n_per_class", 500))
        name = spec.pop("name", "blobs")
        spec.setdefault("n_per_class", 1000)
        try:
            train = synth_blobs(seed=seed, name=name, **spec)
            test = synth_blobs(**{**spec, "n_per_class": test_n}, seed=seed + 7919, name=name)
        except TypeError as exc:
            raise ValidationError(f"bad synthetic dataset spec: {exc}") from None
        return train, test
    if kind == "idx":
        try:
            name = spec.get("name", "idx")
            train = load_idx(spec["train_images"], spec.get("train_labels"), name=name)
            test = load_idx(spec["test_images"], spec.get("test_labels"), name=name) if "test_images" in spec else None
        except KeyError as exc:
            raise ValidationError(f"idx dataset spec is missing {exc.args[0]!r}") from None
        return train, test
    raise ValidationError(f"unknown dataset kind {kind!r}")
