"""Dense tensor with a taped reverse-mode autodiff graph.

A :class:`Tensor` wraps a NumPy array. Operations in :mod:`denet.ops` return
new tensors that remember their parents and a closure mapping the output
gradient to one gradient per parent. Calling :meth:`Tensor.backward` on a
scalar walks that graph once in reverse topological order.

Feature maps are laid out ``C x H x W`` or, for mini-batches, ``N x C x H x W``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation / inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional real array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` start with a zero gradient so
    that parameters untouched by a backward pass still report zeros.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            # leaves own their buffer because later passes add into it in place
            self.grad = np.array(g) if self.is_leaf else g
        elif self.is_leaf:
            self.grad += g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        graph = Graph(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(graph.nodes):
            if node.is_leaf or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            # intermediate buffers are not needed once propagated
            node.grad = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        from denet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from denet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from denet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from denet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from denet import ops
        return ops.div(self, other)

    def __neg__(self):
        from denet import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from denet import ops
        return ops.getitem(self, index)


class Graph:
    """Topologically ordered node list reachable from one output.

    Every node appears after all of its inputs and exactly once, so a reverse
    traversal visits each recorded operation a single time.
    """

    def __init__(self, output: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)
