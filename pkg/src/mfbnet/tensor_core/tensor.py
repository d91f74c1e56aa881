"""Immutable float64 tensors and the reverse-mode tape that differentiates them.

A :class:`Tape` is opened as a context manager. While it is active, every
operation whose inputs depend on a watched tensor appends a node holding its
gradient rule. :func:`backward` then walks the nodes in reverse order.

    with Tape() as tape:
        w = tape.watch(Tensor(w0), "w")
        loss = ops.sum(ops.mul(w, w))
    grads = backward(tape, loss)   # {"w": 2 * w0}
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_ids = itertools.count()
_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major array of 64-bit floats. Never mutated after creation."""

    __slots__ = ("data", "id")

    def __init__(self, data, *, check=True):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr is freshly computed and owned by us
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, precision=4, threshold=8)})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; the strict shape rules live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    input_ids: tuple
    output_id: int
    rule: GradRule


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    watched: dict = field(default_factory=dict)  # name -> Tensor
    _live: set = field(default_factory=set)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: tapes must nest")
        stack.pop()
        return False

    def watch(self, tensor: Tensor, name: Optional[str] = None) -> Tensor:
        name = name if name is not None else f"t{tensor.id}"
        self.watched[name] = tensor
        self._live.add(tensor.id)
        return tensor

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict:
        return {k: self.watch(Tensor._wrap(np.array(v, dtype=np.float64)), k) for k, v in params.items()}

    def is_live(self, t: Tensor) -> bool:
        return t.id in self._live

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, rule: GradRule) -> None:
        ids = tuple(t.id for t in inputs)
        self.nodes.append(Node(op, ids, out.id, rule))
        self._live.add(out.id)


def record(op: str, inputs: Sequence, out: Tensor, rule: GradRule) -> Tensor:
    """Attach ``out`` to the active tape when any tensor input is being tracked."""
    tape = active_tape()
    if tape is None:
        return out
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    if any(tape.is_live(t) for t in tensors):
        tape.record(op, inputs, out, rule)
    return out


def backward(tape: Tape, loss: Tensor, wrt=None):
    """Reverse sweep from the scalar ``loss``.

    ``wrt`` may be None (all watched tensors, keyed by watch name), a mapping
    name -> Tensor, or a sequence of tensors (returns a list). Tensors the loss
    does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        in_grads = node.rule(g)
        for tid, gi in zip(node.input_ids, in_grads):
            if gi is None or tid not in tape._live:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi

    def grad_of(t: Tensor):
        g = grads.get(t.id)
        return np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)

    if wrt is None:
        wrt = tape.watched
    if isinstance(wrt, Mapping):
        return {k: grad_of(t) for k, t in wrt.items()}
    return [grad_of(t) for t in wrt]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_tape():
    """Context that suspends recording (evaluation only)."""
    return _NoTape()


class _NoTape:
    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False
