import logging
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, Sequence

import numpy as np

from grad_core import ops
from grad_core.exceptions import NonFiniteError, ShapeError
from grad_core.tape import Tape, Var

logger = logging.getLogger(__name__)


class Activation(StrEnum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, value: Var) -> Var:
        if self is Activation.RELU:
            return ops.relu(value)
        if self is Activation.TANH:
            return ops.tanh(value)
        return value

    def apply_array(self, value: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(value, 0.0)
        if self is Activation.TANH:
            return np.tanh(value)
        return value


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class Network:
    """Dense feed-forward network: ``h <- act(h @ W + b)`` per layer.

    A ``Network`` is never mutated; training produces new instances through
    :meth:`with_parameters`, so read-only forward passes may run concurrently.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for index, layer in enumerate(layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(
                    f"layer {index}: weight {layer.weight.shape} / bias {layer.bias.shape}"
                )
            if index and layers[index - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {index} expects {layer.in_dim} inputs, "
                    f"previous layer emits {layers[index - 1].out_dim}"
                )
        self.layers = tuple(layers)

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_dim for layer in self.layers]
        return f"Network(dims={dims})"

    @classmethod
    def mlp(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden: Activation | str = Activation.RELU,
        output: Activation | str = Activation.IDENTITY,
        dtype=np.float64,
    ) -> "Network":
        """Xavier-uniform weights and zero biases."""
        if len(dims) < 2:
            raise ShapeError("an mlp needs an input and an output dimension")
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            last = index == len(dims) - 2
            activation = Activation(output if last else hidden)
            layers.append(Layer(weight, np.zeros(fan_out, dtype=dtype), activation))
        return cls(layers)

    @classmethod
    def zeros(
        cls,
        dims: Sequence[int],
        hidden: Activation | str = Activation.RELU,
        output: Activation | str = Activation.IDENTITY,
        dtype=np.float64,
    ) -> "Network":
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = index == len(dims) - 2
            layers.append(
                Layer(
                    np.zeros((fan_in, fan_out), dtype=dtype),
                    np.zeros(fan_out, dtype=dtype),
                    Activation(output if last else hidden),
                )
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Network":
        current = self.parameters()
        if len(params) != len(current):
            raise ShapeError(f"expected {len(current)} parameter arrays, got {len(params)}")
        for old, new in zip(current, params):
            if old.shape != np.shape(new):
                raise ShapeError(f"parameter shape {np.shape(new)} does not match {old.shape}")
        layers = [
            Layer(np.array(params[2 * i]), np.array(params[2 * i + 1]), layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return Network(layers)

    def bind(self, tape: Tape, params: Sequence[Var] | None = None) -> "BoundNetwork":
        if params is None:
            params = [tape.leaf(p, name=f"param{i}") for i, p in enumerate(self.parameters())]
        return BoundNetwork(self, list(params))

    def _check_input(self, x):
        if np.shape(x)[-1] != self.input_dim:
            raise ShapeError(f"network expects {self.input_dim} inputs, got {np.shape(x)}")

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward pass returning logits."""
        self._check_input(x)
        h = np.asarray(x)
        for layer in self.layers:
            h = layer.activation.apply_array(h @ layer.weight + layer.bias)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("network produced non-finite logits")
        return h

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate-layer activations (the input itself for a single layer)."""
        self._check_input(x)
        h = np.asarray(x)
        for layer in self.layers[:-1]:
            h = layer.activation.apply_array(h @ layer.weight + layer.bias)
        return h

    def classify(self, x: np.ndarray) -> np.ndarray:
        """Predicted classes; argmax ties resolve to the lowest class index."""
        return np.argmax(np.atleast_2d(self.predict(x)), axis=-1)


class BoundNetwork:
    """A network whose parameters are leaves (or given vars) on a tape."""

    def __init__(self, network: Network, params: list[Var]):
        self.network = network
        self.params = params

    def _layers(self):
        for i, layer in enumerate(self.network.layers):
            yield self.params[2 * i], self.params[2 * i + 1], layer.activation

    def __call__(self, x) -> Var:
        self.network._check_input(x)
        h = x
        for weight, bias, activation in self._layers():
            h = activation.apply(ops.matmul(h, weight) + bias)
        return h

    def features(self, x) -> Var:
        self.network._check_input(x)
        h = x
        layers = list(self._layers())
        for weight, bias, activation in layers[:-1]:
            h = activation.apply(ops.matmul(h, weight) + bias)
        if len(layers) == 1:
            h = h if isinstance(h, Var) else self.params[0].tape.constant(h)
        return h


def forward(net: Network, x, tape: Tape) -> Var:
    """Record ``net(x)`` on ``tape``; parameters become leaves on that tape."""
    return net.bind(tape)(x)


def input_gradient(
    net: Network, x: np.ndarray, row_loss: Callable[[Var], Var]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss values and ``d loss / d x`` for a batch ``x``.

    ``row_loss`` maps logits to a vector of per-row losses; rows do not
    interact, so the gradient of their sum is each row's own input gradient.
    """
    tape = Tape()
    x_var = tape.leaf(np.atleast_2d(x), name="x")
    bound = net.bind(tape, [tape.constant(p) for p in net.parameters()])
    losses = row_loss(bound(x_var))
    grads = tape.backward(ops.sum(losses))
    return losses.value, grads[x_var].reshape(np.shape(x))
