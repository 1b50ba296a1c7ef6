"""Trainable networks: the feature-head classifier and the cluster-code noise generator.

Models hold their parameters as an insertion-ordered ``dict`` of numpy
arrays. ``forward`` takes an optional mapping of the same names to
Tensors, which is how the data-parallel harness runs a replica's own
copy of the weights through the autodiff graph.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigurationError, ParseError, UsageError

DEFAULT_EPSILON = 8 / 255


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Model:
    arch_id = "base"
    params: dict

    def config(self) -> dict:
        raise NotImplementedError

    def param_names(self) -> list:
        return list(self.params)

    def param_list(self) -> list:
        return list(self.params.values())

    def _bind(self, params: Optional[Mapping]) -> dict:
        if params is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}

    def copy(self):
        clone = type(self).__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def astype(self, dtype):
        clone = self.copy()
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def load_params(self, params: Mapping) -> None:
        for name, value in params.items():
            if name not in self.params or self.params[name].shape != np.shape(value):
                raise ConfigurationError(f"parameter {name!r} does not match the model")
            self.params[name] = np.array(value, dtype=self.params[name].dtype)


class FeatureHeadClassifier(_Model):
    """conv3x3(C→16)·relu·pool → conv3x3(16→32)·relu·pool → linear→F → linear→K.

    ``forward`` returns ``(features, logits)`` from the same pass, so the
    feature layer is part of the differentiated graph rather than read
    back through a side channel.
    """

    arch_id = "feature-head-v1"

    def __init__(self, in_shape=(1, 16, 16), num_outputs: int = 8, feature_dim: int = 64, seed: int = 0, dtype=np.float32):
        c, h, w = (int(v) for v in in_shape)
        if h % 4 or w % 4:
            raise ConfigurationError(f"spatial dims must be divisible by 4, got {h}x{w}")
        self.in_shape = (c, h, w)
        self.num_outputs = int(num_outputs)
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        flat = 32 * (h // 4) * (w // 4)
        self.params = {
            "conv1.w": _uniform(rng, (16, c, 3, 3), c * 9, dtype),
            "conv1.b": _uniform(rng, (16,), c * 9, dtype),
            "conv2.w": _uniform(rng, (32, 16, 3, 3), 16 * 9, dtype),
            "conv2.b": _uniform(rng, (32,), 16 * 9, dtype),
            "feature.w": _uniform(rng, (flat, feature_dim), flat, dtype),
            "feature.b": _uniform(rng, (feature_dim,), flat, dtype),
            "head.w": _uniform(rng, (feature_dim, num_outputs), feature_dim, dtype),
            "head.b": _uniform(rng, (num_outputs,), feature_dim, dtype),
        }

    def config(self) -> dict:
        return {"in_shape": list(self.in_shape), "num_outputs": self.num_outputs, "feature_dim": self.feature_dim, "seed": self.seed}

    def forward(self, x, params: Optional[Mapping] = None):
        p = self._bind(params)
        x = x if isinstance(x, Tensor) else Tensor(E.as_array(x, p["conv1.w"].dtype))
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.in_shape:
            if x.data.ndim == 4 and (x.shape[2] % 4 or x.shape[3] % 4):
                raise ConfigurationError(f"spatial dims must be divisible by 4, got {x.shape[2]}x{x.shape[3]}")
            raise ConfigurationError(f"expected input [B,{','.join(map(str, self.in_shape))}], got {x.shape}")
        h = E.maxpool2(E.relu(E.conv2d(x, p["conv1.w"], p["conv1.b"])))
        h = E.maxpool2(E.relu(E.conv2d(h, p["conv2.w"], p["conv2.b"])))
        h = E.reshape(h, (h.shape[0], -1))
        feature = E.linear(h, p["feature.w"], p["feature.b"])
        logits = E.linear(feature, p["head.w"], p["head.b"])
        return feature, logits

    __call__ = forward

    def features(self, images, chunk: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(images[i : i + chunk])[0].data for i in range(0, len(images), chunk)])

    def logits(self, images, chunk: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(images[i : i + chunk])[1].data for i in range(0, len(images), chunk)])


class MLPClassifier(_Model):
    """Flatten → linear→F (relu) → linear→K; an alternate victim for transfer checks."""

    arch_id = "mlp-v1"

    def __init__(self, in_shape=(1, 16, 16), num_outputs: int = 2, feature_dim: int = 64, seed: int = 0, dtype=np.float32):
        self.in_shape = tuple(int(v) for v in in_shape)
        self.num_outputs = int(num_outputs)
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        d = int(np.prod(self.in_shape))
        self.params = {
            "feature.w": _uniform(rng, (d, feature_dim), d, dtype),
            "feature.b": _uniform(rng, (feature_dim,), d, dtype),
            "head.w": _uniform(rng, (feature_dim, num_outputs), feature_dim, dtype),
            "head.b": _uniform(rng, (num_outputs,), feature_dim, dtype),
        }

    def config(self) -> dict:
        return {"in_shape": list(self.in_shape), "num_outputs": self.num_outputs, "feature_dim": self.feature_dim, "seed": self.seed}

    def forward(self, x, params: Optional[Mapping] = None):
        p = self._bind(params)
        x = x if isinstance(x, Tensor) else Tensor(E.as_array(x, p["feature.w"].dtype))
        if tuple(x.shape[1:]) != self.in_shape:
            raise ConfigurationError(f"expected input [B,{','.join(map(str, self.in_shape))}], got {x.shape}")
        h = E.reshape(x, (x.shape[0], -1))
        feature = E.relu(E.linear(h, p["feature.w"], p["feature.b"]))
        return feature, E.linear(feature, p["head.w"], p["head.b"])

    __call__ = forward
    features = FeatureHeadClassifier.features
    logits = FeatureHeadClassifier.logits


class PerturbationModel(_Model):
    """Maps a frozen Gaussian code per cluster to a noise image bounded by ``epsilon``.

    noise_j = epsilon · tanh(W2 · relu(W1 · code_j + b1) + b2), reshaped to C×H×W.
    Only the MLP weights are trainable; ``codes`` is fixed at construction.
    """

    arch_id = "cluster-generator-v1"

    def __init__(self, k: int, out_shape=(1, 16, 16), epsilon: float = DEFAULT_EPSILON, code_dim: int = 64, hidden: int = 256, seed: int = 0, dtype=np.float32):
        if not 0 < epsilon <= 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1], got {epsilon}")
        self.k = int(k)
        self.out_shape = tuple(int(v) for v in out_shape)
        self.epsilon = float(epsilon)
        self.code_dim = int(code_dim)
        self.hidden = int(hidden)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        out = int(np.prod(self.out_shape))
        self.codes = rng.standard_normal((self.k, self.code_dim)).astype(dtype)
        self.codes.setflags(write=False)
        self.params = {
            "fc1.w": _uniform(rng, (code_dim, hidden), code_dim, dtype),
            "fc1.b": _uniform(rng, (hidden,), code_dim, dtype),
            "fc2.w": _uniform(rng, (hidden, out), hidden, dtype),
            "fc2.b": _uniform(rng, (out,), hidden, dtype),
        }

    def config(self) -> dict:
        return {"k": self.k, "out_shape": list(self.out_shape), "epsilon": self.epsilon, "code_dim": self.code_dim, "hidden": self.hidden, "seed": self.seed}

    def astype(self, dtype):
        clone = super().astype(dtype)
        clone.codes = self.codes.astype(dtype)
        return clone

    def noise_all(self, params: Optional[Mapping] = None) -> Tensor:
        """All k noise images as a Tensor [k, C, H, W]."""
        p = self._bind(params)
        codes = Tensor(self.codes.astype(p["fc1.w"].dtype, copy=False))
        h = E.relu(E.linear(codes, p["fc1.w"], p["fc1.b"]))
        z = E.tanh(E.linear(h, p["fc2.w"], p["fc2.b"]))
        return E.reshape(E.mul(z, self.epsilon), (self.k, *self.out_shape))

    def noise(self, j: int) -> np.ndarray:
        if not 0 <= j < self.k:
            raise UsageError(f"cluster id {j} out of range [0, {self.k})")
        return self.noise_all().data[j].copy()


def generator_noise(g: PerturbationModel, j: int) -> np.ndarray:
    return g.noise(j)


def surrogate_forward(m: FeatureHeadClassifier, x, params=None):
    return m.forward(x, params)


def apply_perturbation(x, delta) -> np.ndarray:
    """``clip(x + delta, 0, 1)``; works on single images or stacked batches."""
    x = np.asarray(x)
    delta = np.asarray(delta)
    if x.shape != delta.shape:
        raise UsageError(f"image shape {x.shape} does not match perturbation shape {delta.shape}")
    return np.clip(x + delta, 0, 1).astype(np.result_type(x.dtype, np.float32), copy=False)


# ------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"UCKP"
CHECKPOINT_VERSION = 1
ARCHES = {cls.arch_id: cls for cls in (FeatureHeadClassifier, MLPClassifier, PerturbationModel)}


def _tensors_for_checkpoint(model) -> list:
    items = []
    if isinstance(model, PerturbationModel):
        items.append(("codes", model.codes))
    items.extend(model.params.items())
    return items


def save_checkpoint(model, path) -> None:
    """Header (magic, version, JSON with arch id / config / shapes) + LE float32 payload."""
    items = _tensors_for_checkpoint(model)
    header = {
        "arch": model.arch_id,
        "config": model.config(),
        "tensors": [[name, list(arr.shape)] for name, arr in items],
    }
    meta = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated header")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + meta_len])
    cls = ARCHES.get(header["arch"])
    if cls is None:
        raise ParseError(f"{path}: unknown arch id {header['arch']!r}")
    model = cls(**header["config"])
    offset = 12 + meta_len
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        chunk = raw[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ParseError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        offset += 4 * count
        if name == "codes":
            model.codes = arr
            model.codes.setflags(write=False)
        else:
            model.params[name] = arr.copy()
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
