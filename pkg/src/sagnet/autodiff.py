"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` in execution order, so
replaying the tape backwards is already a reverse topological traversal.
When no tape is active the primitives only compute values, which is what the
evaluation passes use.

Broadcasting is deliberately narrow: a scalar (size-1) operand may combine with
any tensor, and a 1-D bias of length ``D`` may be added to a 2-D ``(n, D)``
tensor.  Everything else must match exactly or :class:`ShapeMismatch` is raised.
"""
from __future__ import annotations

import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_log = logging.getLogger(__name__)

__all__ = [
    "Tensor", "Parameter", "Tape", "ShapeMismatch", "NotScalar",
    "NonFiniteValue", "DisconnectedParameter", "constant", "matmul", "add",
    "subtract", "mul", "tanh", "sigmoid", "concat", "take", "sum", "mean",
    "square", "scale", "backward", "grad_check",
]


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class DisconnectedParameter(RuntimeError):
    pass


_LOCAL = threading.local()  # each thread records onto its own tape stack


def _tapes() -> list["Tape"]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    # sugar for the common primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward passes."""

    __slots__ = ()

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"<Parameter {self.name!r} shape={self.shape}>"


class Tape:
    """Records primitive applications while active (use as a context manager)."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape() -> Tape | None:
    tapes = _tapes()
    return tapes[-1] if tapes else None


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # owned copy; take() adds in place
    else:
        t.grad = t.grad + g


def _record(value: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = ""
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = fn
        out.requires_grad = True
        tape.nodes.append(out)
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


# ---------------------------------------------------------------- broadcasting

def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b_row"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a_row"
    raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.full(shape, g.sum())
    if kind == f"{side}_row":
        return g.sum(axis=0)
    return g


# ------------------------------------------------------------------ primitives

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a.value, b.value, "add")
    out_value = a.value + b.value

    def fn(g):
        _accum(a, _reduce_to(g, kind, "a", a.value.shape))
        _accum(b, _reduce_to(g, kind, "b", b.value.shape))

    return _record(out_value, (a, b), fn)


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a.value, b.value, "subtract")

    def fn(g):
        _accum(a, _reduce_to(g, kind, "a", a.value.shape))
        _accum(b, _reduce_to(-g, kind, "b", b.value.shape))

    return _record(a.value - b.value, (a, b), fn)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a.value, b.value, "mul")

    def fn(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.value, kind, "a", a.value.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.value, kind, "b", b.value.shape))

    return _record(a.value * b.value, (a, b), fn)


def scale(a, factor: float) -> Tensor:
    """Multiply by a Python constant (no gradient to the constant)."""
    a = _lift(a)
    factor = float(factor)

    def fn(g):
        _accum(a, g * factor)

    return _record(a.value * factor, (a,), fn)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands, or 2-D @ 1-D."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul: expected 2-D @ 1/2-D, got {av.shape} @ {bv.shape}")
    inner = bv.shape[-1] if transpose_b else bv.shape[0]
    if transpose_b and bv.ndim != 2:
        raise ShapeMismatch("matmul: transpose_b needs a 2-D right operand")
    if av.shape[1] != inner:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}"
                            f"{' (T)' if transpose_b else ''}")
    out_value = av @ (bv.T if transpose_b else bv)

    def fn(g):
        if a.requires_grad:
            if bv.ndim == 1:
                _accum(a, np.outer(g, bv))
            else:
                _accum(a, g @ bv if transpose_b else g @ bv.T)
        if b.requires_grad:
            if bv.ndim == 1:
                _accum(b, av.T @ g)
            elif transpose_b:
                _accum(b, g.T @ av)
            else:
                _accum(b, av.T @ g)

    return _record(out_value, (a, b), fn)


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.value)

    def fn(g):
        _accum(a, g * (1.0 - y * y))

    return _record(y, (a,), fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x| and exact at 0
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = _sigmoid(a.value)

    def fn(g):
        _accum(a, g * y * (1.0 - y))

    return _record(y, (a,), fn)


def square(a) -> Tensor:
    a = _lift(a)

    def fn(g):
        _accum(a, 2.0 * g * a.value)

    return _record(a.value * a.value, (a,), fn)


def sum(a) -> Tensor:  # noqa: A001 - mirrors the primitive's name
    a = _lift(a)

    def fn(g):
        _accum(a, np.full(a.value.shape, float(g)))

    return _record(np.asarray(a.value.sum()), (a,), fn)


def mean(a) -> Tensor:
    a = _lift(a)
    n = a.value.size
    if n == 0:
        raise ShapeMismatch("mean of an empty tensor")

    def fn(g):
        _accum(a, np.full(a.value.shape, float(g) / n))

    return _record(np.asarray(a.value.mean()), (a,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_lift(t) for t in tensors)
    if not ts:
        raise ShapeMismatch("concat of nothing")
    try:
        out_value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.value.shape[axis] for t in ts])

    def fn(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _record(out_value, ts, fn)


def take(a, index) -> Tensor:
    """Indexing; the gradient is scattered back in place (repeats accumulate)."""
    a = _lift(a)
    out_value = a.value[index]

    def fn(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        if isinstance(index, (slice, int)):
            a.grad[index] += g
        else:
            np.add.at(a.grad, index, g)

    return _record(np.asarray(out_value), (a,), fn)


# -------------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Parameter] = (),
             strict: bool = False) -> None:
    """Propagate d(loss)/d(.) into every tensor on ``tape``.

    Parameter gradients are added to whatever they already hold; zero them
    between optimizer steps.  With ``strict=True`` any parameter in ``params``
    that the loss does not reach raises :class:`DisconnectedParameter`.
    """
    if loss.value.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("no tape to differentiate; record the loss inside a Tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward()")
    params = list(params)
    reached: set[int] = set()

    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        node.backward_fn(g)
        node.grad = None  # intermediate buffers are not needed past this point
        if strict:
            reached.update(id(p) for p in node.parents if isinstance(p, Parameter))
    tape.consumed = True
    tape.nodes = []

    if strict:
        missing = [p.name for p in params if id(p) not in reached]
        if missing:
            raise DisconnectedParameter(f"loss does not depend on: {', '.join(missing)}")


def grad_check(function: Callable[[], Tensor], parameters: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``function`` must rebuild the scalar loss from the current parameter
    values on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in parameters:
        p.zero_grad()
    with Tape() as tape:
        loss = function()
    if not np.isfinite(loss.value).all():
        raise NonFiniteValue("function returned a non-finite value")
    backward(loss, tape)
    analytic = [p.grad.copy() for p in parameters]

    worst = 0.0
    for p, ga in zip(parameters, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(function().value)
            flat[j] = orig - eps
            fm = float(function().value)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteValue(f"non-finite loss perturbing {p.name}[{j}]")
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            err = abs(gflat[j] - numeric) / denom
            if err > worst:
                worst = err
    return worst
