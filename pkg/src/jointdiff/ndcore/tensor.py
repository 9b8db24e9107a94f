"""Dense tensors with a recorded computation graph for reverse-mode autodiff.

A :class:`Tensor` wraps a numpy array.  Every differentiable op creates a new
tensor that remembers its parents and a closure mapping the output gradient
to one gradient per parent.  :func:`backward` walks that graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True
_ACCUM_DTYPE: type = np.float64


class Tensor:
    """A dense float array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic sugar, routed through ops so the graph is recorded
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that receives gradients."""
    arr = np.array(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=True)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording the graph (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def accumulation_dtype():
    return _ACCUM_DTYPE


@contextlib.contextmanager
def accumulation(dtype) -> Iterator[None]:
    """Set the dtype used for matmul-style reductions inside the block.

    The default is float64.  Training loops may drop to float32 to use the
    single-precision BLAS path; results stay deterministic either way.
    """
    global _ACCUM_DTYPE
    prev = _ACCUM_DTYPE
    _ACCUM_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _ACCUM_DTYPE = prev


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output, recording the graph edge when any parent needs it."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | Iterable[Tensor] | None = None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict ``name -> gradient`` when ``params`` is a dict, a list when
    it is any other iterable, and otherwise only fills ``.grad`` on leaves.
    Parameters that do not influence the loss get a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(topological_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            if node._parents:
                # interior gradients are no longer needed
                del grads[id(node)]

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    if params is None:
        for node in topological_order(loss) if loss.requires_grad else []:
            if not node._parents:
                node.grad = lookup(node)
        return None
    if isinstance(params, dict):
        out = {name: lookup(t) for name, t in params.items()}
        for name, t in params.items():
            t.grad = out[name]
        return out
    out_list = [lookup(t) for t in params]
    for t, g in zip(params, out_list):
        t.grad = g
    return out_list
