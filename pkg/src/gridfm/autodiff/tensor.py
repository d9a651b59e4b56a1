"""Tensor and Tape: the recording half of the reverse-mode engine."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_local = threading.local()


class Tensor:
    """A float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op log for one thread.

    Use as a context manager; ops executed inside record themselves when at
    least one input requires a gradient.
    """

    records: list[_Record] = field(default_factory=list)
    detached: list[int] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(out, inputs, backward))

    def gradient(self, output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(output)/d(param) for every param, in order.

        Params the output does not depend on get a zero gradient and their
        positions are listed in ``self.detached``.
        """
        if output.data.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            # keep grads for leaves that are also requested params
        result = []
        self.detached = []
        for i, p in enumerate(params):
            g = grads.get(id(p))
            if g is None:
                self.detached.append(i)
                g = np.zeros_like(p.data)
            result.append(g)
        if self.detached:
            log.debug("%d params unreachable from output; zero grads", len(self.detached))
        return result


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Attach ``backward`` to ``out`` if any input needs a gradient."""
    if any(t.requires_grad for t in inputs):
        tape = current_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, inputs, backward)
    return out


def grad_of(output: Tensor, params: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    tape = tape or current_tape()
    if tape is None:
        raise RuntimeError("grad_of called outside a Tape context")
    return tape.gradient(output, params)
