"""In-process data-parallel training.

W replicas of a model each run forward/backward on their own shard slice,
meet at a barrier, average gradients with a fixed-order all-reduce, and
apply the same Adam update. With equal shard slices, per-worker
batch-mean losses and no batch-coupled layers, this reproduces
single-worker training on the concatenated global batch.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import AdamState, Tensor, adam_step
from .errors import ConsistencyError, NonFiniteLossError, ValidationError

REDUCE_ORDERS = ("rank-sequential", "binary-tree")


@dataclass
class WorldConfig:
    world_size: int = 4
    per_worker_batch: int = 8
    reduce_order: str = "rank-sequential"
    lanes: str = "threads"  # "threads" runs workers concurrently, "serial" one after another

    def __post_init__(self):
        if self.world_size < 1:
            raise ValidationError("world_size must be >= 1")
        if self.per_worker_batch < 1:
            raise ValidationError("per_worker_batch must be >= 1")
        if self.reduce_order not in REDUCE_ORDERS:
            raise ValidationError(f"reduce_order must be one of {REDUCE_ORDERS}")
        if self.lanes not in ("threads", "serial"):
            raise ValidationError("lanes must be 'threads' or 'serial'")

    @property
    def global_batch(self) -> int:
        return global_batch(self.per_worker_batch, self.world_size)


def global_batch(per_worker_batch: int, world_size: int) -> int:
    if per_worker_batch < 1 or world_size < 1:
        raise ValidationError("batch and world size must be >= 1")
    return per_worker_batch * world_size


def checksum(arrays) -> str:
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def all_reduce_mean(grad_sets: list, order: str = "rank-sequential") -> list:
    """Elementwise mean of W gradient sets, in a fixed accumulation order."""
    if not grad_sets:
        raise ConsistencyError("all_reduce_mean needs at least one gradient set")
    ref = [g.shape for g in grad_sets[0]]
    for rank, gs in enumerate(grad_sets):
        shapes = [g.shape for g in gs]
        if shapes != ref:
            raise ConsistencyError(f"rank {rank} gradient shapes {shapes} differ from rank 0 {ref}")
    world = len(grad_sets)
    if world == 1:
        return [g.copy() for g in grad_sets[0]]
    out = []
    for i in range(len(ref)):
        column = [gs[i] for gs in grad_sets]
        if order == "rank-sequential":
            acc = column[0].copy()
            for g in column[1:]:
                acc += g
        elif order == "binary-tree":
            level = column
            while len(level) > 1:
                nxt = [level[j] + level[j + 1] for j in range(0, len(level) - 1, 2)]
                if len(level) % 2:
                    nxt.append(level[-1])
                level = nxt
            acc = level[0].copy()
        else:
            raise ValidationError(f"unknown reduce order {order!r}")
        out.append(acc / acc.dtype.type(world))
    return out


@dataclass
class StepTrace:
    step: int
    phase: str
    lr: float
    losses: list
    grad_checksums: list
    param_checksum: str = ""

    @property
    def grad_checksum(self) -> str:
        return self.grad_checksums[0]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["grad_checksum"] = self.grad_checksum
        return json.dumps(doc)


LossFn = Callable[[int, dict, object], Tensor]


class DataParallel:
    """W synchronized replicas of one model's parameters plus per-rank Adam state.

    ``loss_fn(rank, params, batch)`` must return a scalar Tensor computed
    from ``params`` (a name→Tensor dict for that rank's replica).
    """

    def __init__(self, model, world: WorldConfig, adam: Optional[dict] = None, trace_sink=None, phase: str = "train"):
        self.model = model
        self.world = world
        self.names = model.param_names()
        base = [model.params[n] for n in self.names]
        self.replicas = [[p.copy() for p in base] for _ in range(world.world_size)]
        self.opt = [AdamState.for_params(base, **(adam or {})) for _ in range(world.world_size)]
        self.trace_sink = trace_sink
        self.phase = phase
        self.steps = 0
        self._pool = None
        if world.lanes == "threads" and world.world_size > 1:
            self._pool = ThreadPoolExecutor(max_workers=world.world_size, thread_name_prefix="ddp-rank")

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def replica(self, rank: int) -> dict:
        return dict(zip(self.names, self.replicas[rank]))

    def _work(self, rank: int, batch, loss_fn: LossFn):
        params = {n: Tensor(p, requires_grad=True, name=n) for n, p in zip(self.names, self.replicas[rank])}
        loss = loss_fn(rank, params, batch)
        loss.backward()
        grads = [params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in self.names]
        return loss.item(), grads

    def step(self, batches: list, loss_fn: LossFn, lr: float) -> StepTrace:
        w = self.world.world_size
        if len(batches) != w:
            raise ValidationError(f"expected {w} shard batches, got {len(batches)}")
        if len({len(b) for b in batches if hasattr(b, "__len__")}) > 1:
            raise ValidationError("shard slices must be equal-sized")
        if self._pool is not None:
            futures = [self._pool.submit(self._work, r, batches[r], loss_fn) for r in range(w)]
            results = [f.result() for f in futures]  # barrier
        else:
            results = [self._work(r, batches[r], loss_fn) for r in range(w)]
        losses = [loss for loss, _ in results]

        reduced = all_reduce_mean([g for _, g in results], self.world.reduce_order)
        received = [[g.copy() for g in reduced] for _ in range(w)] if w > 1 else [reduced]
        grad_sums = [checksum(gs) for gs in received]

        trace = StepTrace(self.steps, self.phase, float(lr), losses, grad_sums)
        if not all(math.isfinite(v) for v in losses):
            raise NonFiniteLossError(f"non-finite loss at {self.phase} step {self.steps}: {losses}", [trace])
        if len(set(grad_sums)) != 1:
            raise ConsistencyError(f"ranks disagree on reduced gradient at step {self.steps}")

        for rank in range(w):
            adam_step(self.replicas[rank], received[rank], self.opt[rank], lr)
        sums = [checksum(r) for r in self.replicas]
        if len(set(sums)) != 1:
            raise ConsistencyError(f"replica divergence after step {self.steps}: {sums}")
        trace.param_checksum = sums[0]
        self.steps += 1
        if self.trace_sink is not None:
            self.trace_sink(trace)
        return trace

    def export(self):
        """Copy of the model carrying rank 0's parameters."""
        out = self.model.copy()
        out.params = {n: p.copy() for n, p in zip(self.names, self.replicas[0])}
        return out


def ddp_step(replicas: DataParallel, batches, loss_fn: LossFn, lr: float) -> StepTrace:
    return replicas.step(batches, loss_fn, lr)
