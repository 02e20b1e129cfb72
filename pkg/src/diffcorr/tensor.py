"""Dense float64 tensors with reverse-mode automatic differentiation.

The autodiff design is a classic Wengert tape: operations executed inside a
``recording(tape)`` context append one node each, in execution order, so the
node list is already topologically sorted. ``backward`` walks it once in
reverse. Tensors are immutable after creation except for gradient
accumulation; a tape is single-owner and never shared between workers.

Only float64 is supported. This keeps gradient-check tolerances unambiguous
and is fast enough at the resolutions this package targets.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument

Array = np.ndarray


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for autodiff.

    ``grad`` is populated (accumulated) by ``backward`` for leaf tensors with
    ``requires_grad=True``; it always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if g.shape != self.data.shape:
            raise InvalidArgument(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # A small amount of operator sugar; the full op set lives in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _as_tensor(other))

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other))

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    """One recorded op: inputs, output, and a closure producing input grads."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[Array], Sequence[Array | None]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; append order is topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


_current_tape: Tape | None = None


class recording:
    """Context manager that makes ``tape`` the active recording target."""

    def __init__(self, tape: Tape):
        self.tape = tape
        self._prev: Tape | None = None

    def __enter__(self) -> Tape:
        global _current_tape
        self._prev = _current_tape
        _current_tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _current_tape
        _current_tape = self._prev


def active_tape() -> Tape | None:
    return _current_tape


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dT into ``t.grad`` for every leaf tensor requiring grad.

    ``loss`` must be a scalar produced on ``tape``. Each node is visited
    exactly once, in reverse execution order, so the sweep is deterministic.
    """
    if loss.size != 1:
        raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.output) for node in tape.nodes}
    owned: set[int] = set()  # keys whose buffer is safe to mutate in place
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue  # dead branch: output does not reach the loss
        owned.discard(id(node.output))
        input_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            tensors[key] = inp
            if key not in grads:
                # closures may hand out shared/viewed arrays; defer copying
                # until a second contribution actually needs accumulation
                grads[key] = g
            elif key in owned:
                grads[key] += g
            else:
                grads[key] = grads[key] + g
                owned.add(key)
    for key, g in grads.items():
        t = tensors[key]
        if t.requires_grad and key not in produced:
            t.accumulate_grad(g)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
