"""Dense float tensors with a reverse-mode autodiff tape.

Image-like values are (N, C, H, W) float arrays. The primitive operations
living in `runet.ops` record onto a process-wide tape in execution order;
`backward()` replays it in reverse, accumulates gradients into the
`requires_grad` leaves, and clears the tape.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "NumericsError",
    "backward",
    "no_grad",
    "grad_enabled",
    "tape_size",
    "clear_tape",
    "tensor",
    "zeros",
    "ones",
]


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate an operation's contract."""


class ConfigError(ValueError):
    """A configuration value is out of its documented range."""


class NumericsError(RuntimeError):
    """Non-finite values appeared where finite ones are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float32/float64 array plus an optional accumulated gradient.

    Tensor data is treated as immutable once created; the two sanctioned
    exceptions are gradient accumulation and in-place parameter updates by
    an optimizer between steps. `grad` accumulates additively across
    backward passes until explicitly cleared, which is what makes shared
    parameters inside an unrolled recurrence receive the sum of their
    per-iteration contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

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
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.grad is not None:
            flags.append("grad")
        tail = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tail})"

    # Arithmetic sugar; the real work is in runet.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class _Node:
    """One executed primitive op: output, inputs, and its backward rule."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class ComputationTape:
    """Execution-ordered op record; reverse replay yields all gradients."""

    def __init__(self):
        self.nodes: list[_Node] = []


_tape = ComputationTape()


def tape_size() -> int:
    return len(_tape.nodes)


def clear_tape():
    _tape.nodes.clear()


def record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    """Attach a backward rule to `out` if grads are on and any input needs them."""
    if _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        node = _Node(out, inputs, backward_fn)
        out.node = node
        _tape.nodes.append(node)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf, then clear the tape.

    Gradients add up: a leaf reached through several paths (parameter
    sharing across recurrence iterations) receives the sum, and repeated
    backward passes over fresh graphs keep accumulating until the caller
    zeroes the grads.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError(
            "backward() on a tensor with no recorded operations (empty tape)"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_tape.nodes):
            out_grad = grads.pop(id(node.out), None)
            if out_grad is None:
                continue
            input_grads = node.backward_fn(out_grad)
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.node is None:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g
                else:
                    held = grads.get(id(inp))
                    grads[id(inp)] = g if held is None else held + g
    finally:
        _tape.nodes.clear()
