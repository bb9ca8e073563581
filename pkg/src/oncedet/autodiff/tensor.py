"""Dense tensors and the gradient tape.

A :class:`Tensor` wraps a numpy array. Operations performed while a
:class:`Tape` is active are recorded on it; :func:`backward` walks the tape in
reverse and deposits gradients on the leaf tensors that asked for them.
Outside of any tape, operations are plain forward computations.

    >>> x = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * 3.0
    >>> backward(y, tape)
    >>> x.grad
    array([3.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """Dense row-major float array with optional gradient participation.

    Image-like tensors use NCHW layout. ``grad`` is populated by
    :func:`backward` for tensors created with ``requires_grad=True``.
    A frozen tensor holds read-only data and can never receive a gradient.
    """

    __slots__ = ("data", "grad", "_requires_grad", "frozen", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialised with non-finite values")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.frozen = False
        self._requires_grad = bool(requires_grad)
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self.frozen:
            raise AssertionError(f"cannot enable gradients on frozen tensor {self.name!r}")
        self._requires_grad = bool(value)

    def freeze(self) -> None:
        """Make the tensor immutable: read-only data, no gradients."""
        self._requires_grad = False
        self.grad = None
        self.frozen = True
        self.data.flags.writeable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; implementations live in functional.py
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a scalar")
        return F.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __getitem__(self, index):
        from . import functional as F
        return F.take(self, index)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self):
        from . import functional as F
        return F.total(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; nested tapes are allowed and the innermost one
    records. A tape is single-threaded: the active-tape stack is thread-local.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        self.nodes.append(_Node(op, inputs, output, fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


class _OpCounter:
    def __init__(self):
        self.counts: dict[str, int] = {}

    def __enter__(self):
        if not hasattr(_local, "counters"):
            _local.counters = []
        _local.counters.append(self)
        return self

    def __exit__(self, *exc):
        _local.counters.remove(self)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def count_ops() -> _OpCounter:
    """Context manager counting every tensor op executed inside it, taped or not."""
    return _OpCounter()


def make_result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    """Wrap an op's output, check finiteness and record it on the active tape."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    for counter in getattr(_local, "counters", ()):
        counter.counts[op] = counter.counts.get(op, 0) + 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.frozen = False
    out.name = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out._requires_grad = needs
    if needs:
        tape.record(op, inputs, out, fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` that requires it.

    Gradients accumulate additively into existing ``.grad`` arrays, so call
    ``zero_grad`` (or an optimizer step) between iterations.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.frozen:
                raise AssertionError(f"gradient reached frozen tensor {inp.name!r}")
            if gi.shape != inp.shape:
                raise AssertionError(f"{node.op}: grad shape {gi.shape} != input shape {inp.shape}")
            if tape.produced(inp):
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype)
            else:
                inp.grad += gi
