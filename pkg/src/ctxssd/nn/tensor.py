"""Reverse-mode autodiff over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled and any
input requires them, remembers the parents it was computed from together with
a closure mapping the output gradient to parent gradients.  ``backward`` walks
that graph in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_local = threading.local()


def _get(name, default):
    return getattr(_local, name, default)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype) -> None:
    _local.dtype = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def is_checked() -> bool:
    return _get("checked", False)


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf screening of every operator output (per thread)."""
    _local.checked = bool(flag)


@contextmanager
def checked_mode(flag: bool = True):
    prev = is_checked()
    set_checked(flag)
    try:
        yield
    finally:
        _local.checked = prev


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operator produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(get_default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self.op = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- graph --------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = _toposort(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.add(self, F.neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __getitem__(self, idx):
        from . import functional as F
        return F.index(self, idx)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def permute(self, *axes):
        from . import functional as F
        return F.permute(self, axes)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def make_result(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op output, wiring the graph only when a parent needs grad."""
    if is_checked() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order
