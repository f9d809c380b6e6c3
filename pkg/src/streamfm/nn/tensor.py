"""Tensors, parameters and the recording tape.

Only the fixed op vocabulary in :mod:`streamfm.nn.ops` records onto a tape.
Usage::

    with Tape() as tape:
        loss = model.loss(...)
    tape.backward(loss)          # gradients land in every Parameter.grad
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError

__all__ = ["Tensor", "Parameter", "Tape", "backward", "active_tape", "set_debug"]

_DEBUG = False
_TAPES: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow)."""
    global _DEBUG
    _DEBUG = bool(flag)


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar, defined in ops to keep the vocabulary in one place
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
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    __slots__ = ("name", "grad")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.asarray(value).dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate ``d loss / d param`` into ``param.grad`` for every parameter.

    Nodes are visited in exact reverse execution order. Calling this twice on
    the same tape adds the gradients twice.
    """
    if not tape.nodes:
        raise RuntimeError("backward called on an empty tape (no forward pass recorded)")
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward needs a scalar loss tensor")
    if not any(node.out is loss for node in tape.nodes):
        raise RuntimeError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad = inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def make(data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it if a tape is active and grads are needed."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by an op")
    tape = active_tape()
    needs = tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs
    )
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out
