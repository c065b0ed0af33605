import logging

import numpy as np

from attacks.base import AdvResult, loss_and_gradient, misclassified, natural_logits_for
from attacks.exceptions import AttackError
from attacks.specs import AttackKind, AttackSpec
from grad_core.losses import LossKind
from grad_core.nn import Network
from lib.numeric import make_rng
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)


def fgsm(
    net: Network,
    x: np.ndarray,
    y,
    tm: ThreatModel,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
    targeted: bool = False,
) -> AdvResult:
    """One signed-gradient step of size epsilon; ``sign(0) = 0``.

    ``targeted`` steps down the cross-entropy of the least-likely class instead.
    """
    x = np.asarray(x, dtype=np.float64)
    if targeted:
        target = np.argmin(np.atleast_2d(net.predict(x)), axis=-1)
        losses, grad = loss_and_gradient(net, x, target)
        delta = -tm.epsilon * np.sign(grad)
    else:
        losses, grad = loss_and_gradient(net, x, y, loss, natural_logits_for(net, x, loss))
        delta = tm.epsilon * np.sign(grad)
    delta = tm.project(x, delta)
    return AdvResult(delta, misclassified(net, x + delta, y), [float(np.mean(losses))])


def loss_gradients(net: Network, x: np.ndarray, y, tm: ThreatModel):
    """Cross-entropy input gradients at ``x`` and at its FGSM point (generator side inputs)."""
    _, g1 = loss_and_gradient(net, x, y)
    x_fgsm = x + tm.project(x, tm.epsilon * np.sign(g1))
    _, g2 = loss_and_gradient(net, x_fgsm, y)
    return g1, g2


def iterative_attack(
    net: Network, x: np.ndarray, y, tm: ThreatModel, spec: AttackSpec, rng=None
) -> AdvResult:
    """Projected signed-gradient ascent (PGD, MIM with ``momentum_decay``, C&W via its loss).

    Every iterate of every restart is scored; per example the returned
    perturbation is the best one seen, misclassifying iterates first, then
    highest loss.
    """
    if spec.kind is not AttackKind.ITERATIVE:
        raise AttackError(f"iterative_attack cannot run a {spec.kind} spec")
    rng = make_rng(rng)
    tm = spec.threat_model(tm)
    alpha = spec.alpha(tm.epsilon)
    shape = np.shape(x)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(y)
    natural = natural_logits_for(net, x, spec.loss)

    best_delta = np.zeros_like(x)
    best_loss = np.full(labels.shape, -np.inf)
    best_fooled = np.zeros(labels.shape, dtype=bool)
    trace = []
    for _ in range(spec.restarts):
        if spec.random_start:
            delta = tm.project(x, rng.uniform(-tm.epsilon, tm.epsilon, size=x.shape))
        else:
            delta = np.zeros_like(x)
        momentum = np.zeros_like(x)
        for step in range(spec.steps + 1):
            losses, grad = loss_and_gradient(net, x + delta, labels, spec.loss, natural)
            fooled = misclassified(net, x + delta, labels)
            better = (fooled & ~best_fooled) | ((fooled == best_fooled) & (losses > best_loss))
            best_loss = np.where(better, losses, best_loss)
            best_fooled = best_fooled | fooled
            best_delta = np.where(better[:, None], delta, best_delta)
            trace.append(float(np.mean(losses)))
            if step == spec.steps:
                break
            if spec.momentum_decay > 0:
                scale = np.sum(np.abs(grad), axis=-1, keepdims=True) + 1e-12
                momentum = spec.momentum_decay * momentum + grad / scale
                direction = momentum
            else:
                direction = grad
            delta = tm.project(x, delta + alpha * np.sign(direction))
    logger.debug(
        "attack=%s steps=%d restarts=%d fooled=%d/%d",
        spec.label,
        spec.steps,
        spec.restarts,
        int(best_fooled.sum()),
        best_fooled.size,
    )
    return AdvResult(best_delta.reshape(shape), best_fooled, trace)
