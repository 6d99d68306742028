"""Dense tensor type and the reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape (non-scalar loss, consumed tape)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


DEFAULT_DTYPE = np.float32


class Tensor:
    """A numpy array plus optional gradient tracking.

    Values are treated as immutable once produced; operations always return
    new tensors. ``grad`` is populated by :func:`backward` on leaves that
    have ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "_index", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self._index = 0

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# -- tape ---------------------------------------------------------------------

BackwardFn = Callable[[Sequence[Optional[np.ndarray]]], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple  # of Tensor
    backward: Optional[BackwardFn]
    n_outputs: int
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Operation record of one forward pass, consumed by one backward pass."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()
_ids = itertools.count()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    """Drop whatever has been recorded and start a fresh tape."""
    old = _state.tape
    old.consumed = True
    old.nodes.clear()
    _state.tape = Tape()
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # min and max propagate nan and expose +-inf without a temporary array
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return arr


def record(op: str, inputs: Sequence[Tensor], outputs: Sequence[np.ndarray],
           backward: BackwardFn, check: bool = True) -> list:
    """Wrap raw output arrays as tensors and, when needed, put a node on the tape.

    ``backward`` receives one upstream gradient per output (None when that
    output received no gradient) and returns one gradient per input.
    """
    if check:
        for arr in outputs:
            check_finite(arr, op)
    track = _state.grad_enabled and any(t.requires_grad for t in inputs)
    results = [Tensor(arr) for arr in outputs]
    if track:
        tape = _state.tape
        node = Node(next(_ids), op, tuple(inputs), backward, len(outputs), tape)
        tape.nodes.append(node)
        for i, t in enumerate(results):
            t.requires_grad = True
            t._node = node
            t._index = i
    return results


def _accumulate(slot: dict, key, index: int, n: int, g: np.ndarray) -> None:
    grads = slot.get(key)
    if grads is None:
        grads = [None] * n
        slot[key] = grads
    if grads[index] is None:
        grads[index] = g
    else:
        grads[index] = grads[index] + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    The tape that recorded ``loss`` is consumed: calling backward again on
    anything recorded on it raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("loss was not produced by a recorded operation")
    tape = node.tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    pending: dict = {}
    _accumulate(pending, node.id, loss._index, node.n_outputs,
                np.ones(loss.shape, dtype=loss.dtype))
    stop = tape.nodes.index(node)
    for nd in reversed(tape.nodes[: stop + 1]):
        upstream = pending.pop(nd.id, None)
        if upstream is None:
            continue
        in_grads = nd.backward(upstream)
        for t, g in zip(nd.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise TapeError(f"{nd.op}: gradient shape {g.shape} != input shape {t.shape}")
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            else:
                _accumulate(pending, t._node.id, t._index, t._node.n_outputs, g)

    tape.consumed = True
    tape.nodes.clear()
    if _state.tape is tape:
        _state.tape = Tape()
