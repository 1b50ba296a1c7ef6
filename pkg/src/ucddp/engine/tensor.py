"""Dense tensor value with reverse-mode differentiation.

A ``Tensor`` wraps a contiguous numpy array (float32 unless built from
float64 data) and, when produced by a differentiable op, a link to its
parents plus a closure mapping the output gradient to parent gradients.
Calling :meth:`Tensor.backward` on a scalar walks that graph once in
reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import UsageError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_array(value, dtype=None) -> np.ndarray:
    """Coerce ``value`` to a C-contiguous real array.

    float64 inputs keep their precision (used by gradient checks); every
    other input becomes float32.
    """
    arr = np.asarray(value)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.data = data if isinstance(data, np.ndarray) and data.flags.c_contiguous else as_array(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = as_array(self.data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.name = name

    @classmethod
    def param(cls, data, name=None) -> "Tensor":
        """Leaf tensor that collects a gradient on backward."""
        return cls(as_array(data) if not isinstance(data, np.ndarray) else data.copy(), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"tensor of shape {self.shape} is not a scalar")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Leaves flagged ``requires_grad`` that sit in the graph but receive no
        signal (e.g. behind a dead branch) still end up with a zero array.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad:
                    if g is None:
                        g = np.zeros_like(node.data)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is None:
                g = np.zeros_like(node.data)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; each node appended once after all its parents
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(as_array(data), requires_grad=requires_grad)


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(as_array(value))
