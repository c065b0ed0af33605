from dataclasses import dataclass, field

import numpy as np

from grad_core.losses import LossKind, per_example_loss
from grad_core.nn import Network, input_gradient
from grad_core.tape import Tape


@dataclass
class AdvResult:
    """Perturbations for a batch and whether each one fooled the model."""

    delta: np.ndarray
    success: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    queries: int = 0

    @property
    def accuracy(self) -> float:
        return float(1.0 - np.mean(self.success))

    def adversarial(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) + self.delta


def misclassified(net: Network, x_adv: np.ndarray, y) -> np.ndarray:
    return net.classify(x_adv) != np.atleast_1d(y)


def losses_from_logits(logits: np.ndarray, y, kind=LossKind.CROSS_ENTROPY, natural_logits=None):
    tape = Tape()
    natural = None if natural_logits is None else np.atleast_2d(natural_logits)
    rows = per_example_loss(kind, tape.constant(np.atleast_2d(logits)), np.atleast_1d(y), natural)
    return rows.value


def loss_and_gradient(
    net: Network, x: np.ndarray, y, kind=LossKind.CROSS_ENTROPY, natural_logits=None
):
    """Per-row loss values and their input gradients."""
    natural = None if natural_logits is None else np.atleast_2d(natural_logits)
    labels = np.atleast_1d(y)
    return input_gradient(net, x, lambda logits: per_example_loss(kind, logits, labels, natural))


def natural_logits_for(net: Network, x: np.ndarray, kind) -> np.ndarray | None:
    return net.predict(np.atleast_2d(x)) if LossKind(kind) is LossKind.KL_TO_NATURAL else None


class QueryModel:
    """Query-only view of a classifier.

    Exposes logits, losses and predictions and counts every queried row; no
    gradient of the wrapped network is reachable through it.
    """

    def __init__(self, net: Network):
        self._net = net
        self.queries = 0

    @property
    def input_dim(self) -> int:
        return self._net.input_dim

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        self.queries += x.shape[0]
        return self._net.predict(x)

    def loss(self, x: np.ndarray, y, kind=LossKind.CROSS_ENTROPY, natural_logits=None):
        return losses_from_logits(self.logits(x), y, kind, natural_logits)

    def classify(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)
