"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every differentiable op executed while it is the
active tape. Ops evaluated with no active tape are plain NumPy calls, which is
what inference and finite-difference probing use.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss, [w])[w]
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d float64 array that can take part in a :class:`Tape`."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_tape", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __pow__(self, exponent: float):
        return _ops().power(self, exponent)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Nodes are appended in execution order, so inputs always precede the ops
    that consume them; :meth:`backward` walks the list in exact reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, x: Tensor) -> bool:
        return x.requires_grad or x._tape is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        for x in inputs:
            if x.requires_grad and x._tape is not self:
                self.leaves.setdefault(id(x), x)
        out.node = len(self.nodes)
        out._tape = self
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf reachable from ``loss``.

        Returns a mapping from leaf tensor to gradient. Leaves listed in
        ``params`` but not reachable get a zero gradient. Each returned leaf
        also has its ``.grad`` attribute set.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = list(params) if params is not None else None
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        elif loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)

        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = vjp(g)
            for x, gx in zip(inputs, input_grads):
                if gx is None or not self.tracks(x):
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx

        result: dict[Tensor, np.ndarray] = {}
        leaves = params if params is not None else list(self.leaves.values())
        if params is None and loss.requires_grad and loss._tape is not self:
            leaves.append(loss)
        for leaf in leaves:
            g = grads.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g
            result[leaf] = g
        return result


def make_result(data: np.ndarray, inputs: tuple, vjp: VJP) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        for x in inputs:
            if tape.tracks(x):
                tape.record(out, inputs, vjp)
                break
    return out
