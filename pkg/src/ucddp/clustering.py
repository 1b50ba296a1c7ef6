"""Label-agnostic cluster construction: k-means and a derangement of cluster ids."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

SPACES = ("pixel", "surrogate-feature")


@dataclass
class ClusterAssignment:
    k: int
    centroids: np.ndarray  # [k, D] float64
    assign: np.ndarray  # [N] int64
    pi: np.ndarray  # [k] int64, derangement of range(k)
    space: str = "pixel"
    seed: int = 0
    inertia: float = 0.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.assign = np.asarray(self.assign, dtype=np.int64)
        self.pi = np.asarray(self.pi, dtype=np.int64)
        if self.space not in SPACES:
            raise ValidationError(f"unknown clustering space {self.space!r}")
        if self.assign.size and (self.assign.min() < 0 or self.assign.max() >= self.k):
            raise ValidationError("cluster ids must lie in [0, k)")
        if not is_derangement(self.pi) or len(self.pi) != self.k:
            raise ValidationError("pi must be a derangement of range(k)")

    @property
    def targets(self) -> np.ndarray:
        """Shuffled label of every point, ``pi[assign[i]]``."""
        return self.pi[self.assign]

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "space": self.space,
            "seed": int(self.seed),
            "inertia": float(self.inertia),
            "pi": self.pi.tolist(),
            "assign": self.assign.tolist(),
            "centroids": self.centroids.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterAssignment":
        try:
            return cls(
                k=int(doc["k"]),
                centroids=np.asarray(doc["centroids"], dtype=np.float64),
                assign=np.asarray(doc["assign"], dtype=np.int64),
                pi=np.asarray(doc["pi"], dtype=np.int64),
                space=doc.get("space", "pixel"),
                seed=int(doc.get("seed", 0)),
                inertia=float(doc.get("inertia", 0.0)),
            )
        except KeyError as exc:
            raise ParseError(f"cluster document is missing field {exc.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ClusterAssignment":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


def is_derangement(pi) -> bool:
    pi = np.asarray(pi)
    n = len(pi)
    return bool(n >= 2 and sorted(pi.tolist()) == list(range(n)) and not (pi == np.arange(n)).any())


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iters, tol, history):
    d = _sq_dists(points, centroids)
    assign = d.argmin(axis=1)
    inertia = float(d[np.arange(len(points)), assign].sum())
    history.append(inertia)
    k = len(centroids)
    for _ in range(max_iters):
        new = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = points[assign == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed each empty centroid at the point farthest from its centroid
            own = d[np.arange(len(points)), assign].copy()
            for j in empty:
                far = int(own.argmax())
                new[j] = points[far]
                own[far] = -1.0
        nd = _sq_dists(points, new)
        new_assign = nd.argmin(axis=1)
        new_inertia = float(nd[np.arange(len(points)), new_assign].sum())
        history.append(new_inertia)
        changed = bool((new_assign != assign).any())
        improvement = inertia - new_inertia
        centroids, assign, inertia, d = new, new_assign, new_inertia, nd
        if not changed or improvement < tol:
            break
    return centroids, assign, inertia


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
    history: Optional[list] = None,
):
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts.

    Returns ``(centroids, assign, inertia)``. If ``history`` is given, it
    receives one list of per-iteration inertias per restart.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValidationError(f"k = {k} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        trace: list = []
        result = _lloyd(points, _kmeans_pp(points, k, rng), max_iters, tol, trace)
        if history is not None:
            history.append(trace)
        if best is None or result[2] < best[2]:
            best = result
    centroids, assign, inertia = best
    return centroids, assign.astype(np.int64), inertia


def derange_labels(k: int, seed: int = 0) -> np.ndarray:
    """Seeded random permutation of ``range(k)`` with no fixed point.

    Shuffles until a derangement comes up (about e ≈ 2.7 tries on average).
    """
    if k < 2:
        raise ValidationError(f"no derangement exists for k = {k}")
    rng = np.random.default_rng(seed)
    ident = np.arange(k)
    while True:
        pi = rng.permutation(k)
        if not (pi == ident).any():
            return pi.astype(np.int64)


def embed_for_clustering(ds, space: str = "pixel", surrogate=None, chunk: int = 512) -> np.ndarray:
    """Representation that k-means runs on: flattened pixels or surrogate features."""
    if space == "pixel":
        return ds.images.reshape(len(ds), -1).copy()
    if space == "surrogate-feature":
        if surrogate is None:
            raise ConfigurationError("surrogate-feature space needs a surrogate model")
        return surrogate.features(ds.images, chunk=chunk)
    raise ConfigurationError(f"unknown clustering space {space!r}; expected one of {SPACES}")


def cluster_dataset(ds, k: int, seed: int = 0, space: str = "pixel", surrogate=None, **kmeans_kw) -> ClusterAssignment:
    """Embed, run k-means, and derange the cluster labels. Never reads ``ds.labels``."""
    points = embed_for_clustering(ds, space, surrogate)
    centroids, assign, inertia = kmeans(points, k, seed=seed, **kmeans_kw)
    pi = derange_labels(k, seed)
    return ClusterAssignment(k, centroids, assign, pi, space, seed, inertia)
