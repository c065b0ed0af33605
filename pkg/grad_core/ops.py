"""Differentiable primitives.

Every primitive takes ``Var`` operands (plain arrays and numbers are lifted to
constants on the operand's tape), records one node, and supplies the
vector-Jacobian product used by :func:`grad_core.tape.backward`.
"""

import numpy as np

from grad_core.exceptions import ShapeError
from grad_core.tape import Tape, Var


def _tape_of(*operands) -> Tape:
    for operand in operands:
        if isinstance(operand, Var):
            return operand.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, operand) -> Var:
    if isinstance(operand, Var):
        if operand.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
        return operand
    return tape.constant(operand)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Var, b: Var):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from err


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape.record("add", a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return tape.record("sub", a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return tape.record("mul", a.value * b.value, (a, b), vjp)


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return tape.record("div", out, (a, b), vjp)


def neg(a: Var) -> Var:
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def power(a: Var, exponent: float) -> Var:
    def vjp(g):
        return (g * exponent * a.value ** (exponent - 1),)

    return a.tape.record(f"pow{exponent}", a.value**exponent, (a,), vjp)


def square(a: Var) -> Var:
    return a.tape.record("square", a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return a.tape.record("log", out, (a,), lambda g: (g / a.value,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Var) -> Var:
    out = np.logaddexp(0.0, a.value)
    slope = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record("softplus", out, (a,), lambda g: (g * slope,))


def clip(a: Var, lo, hi) -> Var:
    """Clamp to ``[lo, hi]``; gradient passes where the input is inside the range."""
    inside = (a.value >= lo) & (a.value <= hi)
    return a.tape.record("clip", np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def sum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError("matmul supports 1-D and 2-D operands only")

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.value.T, a.value.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.value @ g, np.outer(a.value, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.value), a.value.T @ g
        return g * b.value, g * a.value

    return tape.record("matmul", a.value @ b.value, (a, b), vjp)


def reshape(a: Var, shape) -> Var:
    original = a.shape
    return a.tape.record(
        "reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(original),)
    )


def concat(operands, axis=-1) -> Var:
    tape = _tape_of(*operands)
    operands = [_lift(tape, o) for o in operands]
    sizes = [o.shape[axis] for o in operands]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([o.value for o in operands], axis=axis)
    return tape.record("concat", out, operands, vjp)


def getitem(a: Var, key) -> Var:
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return a.tape.record("getitem", a.value[key], (a,), vjp)


def pick(a: Var, labels: np.ndarray) -> Var:
    """Row-wise ``a[i, labels[i]]`` for a 2-D ``a``."""
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, np.asarray(labels, dtype=np.intp)))


def logsumexp(a: Var, axis=-1, keepdims=True) -> Var:
    peak = np.max(a.value, axis=axis, keepdims=True)
    shifted = np.exp(a.value - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return a.tape.record("logsumexp", out, (a,), vjp)


def max_where(a: Var, mask: np.ndarray, axis=-1) -> Var:
    """Maximum over entries where ``mask`` is true; ties go to the lowest index."""
    masked = np.where(mask, a.value, -np.inf)
    arg = np.argmax(masked, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis=axis)
    out = np.squeeze(out, axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return a.tape.record("max_where", out, (a,), vjp)


def cosine_similarity(a, b, axis=-1) -> Var:
    """Row-wise cosine similarity."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape != b.shape and np.broadcast_shapes(a.shape, b.shape) != a.shape:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    dot = sum(a * b, axis=axis)
    norm_a = sqrt(sum(square(a), axis=axis) + 1e-24)
    norm_b = sqrt(sum(square(b), axis=axis) + 1e-24)
    return dot / (norm_a * norm_b)

