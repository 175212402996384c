"""Dense tensors with a recorded tape for reverse-mode gradients.

A :class:`Tensor` wraps a contiguous numpy buffer. Every differentiable op in
:mod:`convllava.ops` produces a new tensor and, when any input requires a
gradient, attaches a :class:`TapeNode` holding the saved activations and the
vector-Jacobian product of that op. :func:`grad` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = {
    "default_dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "deterministic": False,
    "check_finite": True,
}


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["default_dtype"] = dtype


def get_default_dtype() -> np.dtype:
    return _state["default_dtype"]


def set_deterministic(flag: bool) -> None:
    """Force fixed-order reductions for loss values."""
    _state["deterministic"] = bool(flag)


def is_deterministic() -> bool:
    return _state["deterministic"]


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["default_dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["default_dtype"] = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """Row-major numeric array; images use (batch, channels, height, width)."""

    __slots__ = ("data", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar delegates to ops
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

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    """Wrap an op's output and record it on the tape when needed."""
    if _state["check_finite"] and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward, saved)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    order.reverse()
    return order


def backward_all(output: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar output for every tensor on its tape, keyed by id."""
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for t in _topological_order(output):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        in_grads = t.node.backward(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise RuntimeError(f"{t.node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    return grads


def grad(output: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]):
    """Reverse-mode gradients of ``output`` with respect to ``params``.

    Returns a dict when ``params`` is a mapping, otherwise a list in the same
    order. Parameters the output does not depend on get a zero gradient and a
    logged diagnostic.
    """
    all_grads = backward_all(output)

    def lookup(label, p: Tensor) -> np.ndarray:
        g = all_grads.get(id(p))
        if g is None:
            logger.warning("parameter %s is not on the tape; returning zero gradient", label)
            return np.zeros_like(p.data)
        return g

    if isinstance(params, Mapping):
        return {k: lookup(k, p) for k, p in params.items()}
    return [lookup(i, p) for i, p in enumerate(params)]


class MacCounter:
    """Tallies multiply-accumulates performed by conv2d and linear."""

    def __init__(self):
        self.total = 0
        self.calls: list[tuple[str, int]] = []

    def add(self, op: str, macs: int) -> None:
        self.total += int(macs)
        self.calls.append((op, int(macs)))


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def record_macs(op: str, macs: int) -> None:
    for c in _counters:
        c.add(op, macs)
