import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from grad_core.exceptions import NonFiniteError, NonScalarLossError

logger = logging.getLogger(__name__)

VectorJacobian = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: VectorJacobian | None
    leaf: bool = False
    name: str = ""


class Var:
    """A value recorded on a :class:`Tape`.

    Arithmetic on a ``Var`` records new nodes on the same tape. Raw numpy
    arrays and Python numbers mix in freely and are treated as constants.
    """

    __slots__ = ("tape", "index", "value")
    # make ``ndarray + Var`` dispatch to Var.__radd__
    __array_priority__ = 100

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(op={node.op!r}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.item())

    def __add__(self, other):
        from grad_core import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from grad_core import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from grad_core import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from grad_core import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from grad_core import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from grad_core import ops

        return ops.div(other, self)

    def __neg__(self):
        from grad_core import ops

        return ops.neg(self)

    def __pow__(self, exponent: float):
        from grad_core import ops

        return ops.power(self, exponent)

    def __matmul__(self, other):
        from grad_core import ops

        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from grad_core import ops

        return ops.matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        from grad_core import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from grad_core import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class GradientMap(dict):
    """Leaf index -> gradient, also indexable by the leaf ``Var`` itself."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.index
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Var):
            key = key.index
        return super().__contains__(key)


def _as_float(value, copy=False) -> np.ndarray:
    array = np.array(value, copy=True) if copy else np.asarray(value)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    return array


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended as operations execute, so inputs always precede the
    nodes that consume them and a single reverse sweep is a valid
    topological traversal.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: Node, value: np.ndarray) -> Var:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op={node.op} produced a non-finite value")
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, value, name: str = "") -> Var:
        array = _as_float(value, copy=True)
        return self._append(Node("leaf", (), None, leaf=True, name=name), array)

    def constant(self, value) -> Var:
        array = _as_float(value)
        return self._append(Node("const", (), None), array)

    def record(
        self, op: str, value: np.ndarray, inputs: Sequence[Var], vjp: VectorJacobian
    ) -> Var:
        return self._append(Node(op, tuple(v.index for v in inputs), vjp), np.asarray(value))

    @property
    def leaves(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.leaf]

    def backward(self, loss: Var) -> GradientMap:
        return backward(self, loss)


def backward(tape: Tape, loss: Var) -> GradientMap:
    """Populate gradients of ``loss`` for every leaf on ``tape``.

    Leaves that ``loss`` does not depend on map to zero arrays.
    """
    if loss.tape is not tape:
        raise ValueError("loss was recorded on a different tape")
    if loss.value.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)

    for index in range(loss.index, -1, -1):
        upstream = grads[index]
        node = tape.nodes[index]
        if upstream is None or node.vjp is None:
            continue
        for parent, contribution in zip(node.inputs, node.vjp(upstream)):
            if contribution is None:
                continue
            if grads[parent] is None:
                grads[parent] = contribution
            else:
                grads[parent] = grads[parent] + contribution

    result = GradientMap()
    for index in tape.leaves:
        grad = grads[index]
        if grad is None:
            grad = np.zeros_like(tape.values[index])
        elif not np.all(np.isfinite(grad)):
            name = tape.nodes[index].name or index
            raise NonFiniteError(f"gradient for leaf {name} is non-finite")
        result[index] = np.broadcast_to(grad, tape.values[index].shape).copy()
    return result


def value_and_grad(fn: Callable[..., Var], *arrays) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``fn`` on fresh leaves and return its value and gradients."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    grads = tape.backward(out)
    return out.item(), [grads[leaf] for leaf in leaves]
