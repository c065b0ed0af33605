from typing import Callable

import numpy as np

from grad_core import ops
from grad_core.exceptions import NonFiniteError, ShapeError
from grad_core.nn import Network, input_gradient
from grad_core.tape import Var


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5):
    """Central finite differences of a scalar function, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        upper = fn(x)
        x[index] = original - h
        lower = fn(x)
        x[index] = original
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


def hvp(net: Network, loss_fn: Callable[[Var], Var], x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of ``loss_fn(net(x))`` w.r.t. a single input ``x``.

    Central differences of first-order input gradients along ``v``; the step is
    ``1e-4`` relative to the input's infinity-norm scale.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise ShapeError(f"hvp: x {x.shape} and v {v.shape} differ")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("hvp direction must be nonzero")
    direction = v / norm
    h = 1e-4 * max(1.0, float(np.max(np.abs(x))))

    def gradient_at(point):
        _, grad = input_gradient(net, point, lambda logits: ops.reshape(loss_fn(logits), (1,)))
        return grad

    product = norm * (gradient_at(x + h * direction) - gradient_at(x - h * direction)) / (2 * h)
    if not np.all(np.isfinite(product)):
        raise NonFiniteError("hessian-vector product is non-finite")
    return product
