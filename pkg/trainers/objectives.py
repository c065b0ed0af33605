"""Objectives shared by the inner maximization and the classifier step."""

from dataclasses import dataclass

import numpy as np

from attacks.base import losses_from_logits
from grad_core.losses import LossKind, kl_divergence, softmax_cross_entropy
from grad_core.nn import Network
from grad_core.tape import Tape, Var
from lib.numeric import make_rng
from perturb_dist.exceptions import DistributionError
from perturb_dist.explicit import TanhGaussianParams, inner_objective_exp, push_forward
from perturb_dist.implicit import (
    ImplicitSampler,
    VariationalPosterior,
    entropy_lower_bound,
    sample_implicit,
)
from perturb_dist.threat import ThreatModel
from trainers.specs import OuterLoss


@dataclass(frozen=True)
class ImplicitDistribution:
    """An implicit sampler conditioned on a batch, with the posterior bounding its entropy."""

    sampler: ImplicitSampler
    posterior: VariationalPosterior
    g1: np.ndarray
    g2: np.ndarray


def _implicit_objective(net, x, y, dist, tm, lam, k, rng, loss, natural_logits):
    x2 = np.atleast_2d(x)
    repeat = (k, 1)
    x_rep = np.tile(x2, repeat)
    delta, z = sample_implicit(
        dist.sampler, x_rep, np.tile(dist.g1, repeat), np.tile(dist.g2, repeat), tm, rng
    )
    delta = tm.project(x_rep, delta)
    natural = None if natural_logits is None else np.tile(np.atleast_2d(natural_logits), repeat)
    losses = losses_from_logits(net.predict(x_rep + delta), np.tile(y, k), loss, natural)
    bound = entropy_lower_bound(dist.posterior, z, delta)
    return float(np.mean(losses) + lam * np.mean(bound))


def objective_j(
    net: Network,
    x: np.ndarray,
    y,
    dist: TanhGaussianParams | ImplicitDistribution,
    tm: ThreatModel,
    lam: float,
    k: int,
    rng,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
    natural_logits: np.ndarray | None = None,
) -> float:
    """Monte Carlo ``E[L(f(x + delta), y)] + lam * H(p)``, averaged over examples.

    Explicit distributions contribute their analytic ``-log p``; implicit ones
    substitute the variational bound ``log q(z | delta)``.
    """
    labels = np.atleast_1d(y)
    if isinstance(dist, TanhGaussianParams):
        return inner_objective_exp(
            net, x, labels, dist, tm, lam, k, rng, loss=loss, natural_logits=natural_logits
        ).total
    if isinstance(dist, ImplicitDistribution):
        if k < 1 or lam < 0:
            raise DistributionError("objective_j needs k >= 1 and a non-negative entropy weight")
        return _implicit_objective(
            net, x, labels, dist, tm, lam, k, make_rng(rng), loss, natural_logits
        )
    raise TypeError(f"objective_j cannot evaluate a {type(dist).__name__}")


def trades_loss(natural_logits: Var, adversarial_logits: Var, y, beta: float) -> Var:
    """``CE(f(x), y) + beta * KL(f(x + delta) || f(x))`` averaged over rows."""
    natural = softmax_cross_entropy(natural_logits, y)
    return natural + beta * kl_divergence(adversarial_logits, natural_logits)


def trades_objective(
    net: Network,
    x: np.ndarray,
    y,
    delta_or_dist,
    beta: float,
    tm: ThreatModel | None = None,
    rng=None,
) -> float:
    """TRADES objective at a fixed perturbation or one draw from a tanh-Gaussian."""
    if beta <= 0:
        raise ValueError("the TRADES weight beta must be positive")
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(delta_or_dist, TanhGaussianParams):
        if tm is None:
            raise ValueError("sampling a perturbation needs the threat model")
        r = make_rng(rng).standard_normal(np.shape(delta_or_dist.mu))
        delta = tm.project(x2, push_forward(delta_or_dist, tm, r))
    else:
        delta = np.atleast_2d(delta_or_dist)
    tape = Tape()
    bound = net.bind(tape, [tape.constant(p) for p in net.parameters()])
    return trades_loss(bound(x2), bound(x2 + delta), np.atleast_1d(y), beta).item()


def outer_loss_graph(bound, x: np.ndarray, y, adversarial, loss: OuterLoss, beta: float) -> Var:
    """Classifier objective on adversarial rows aligned with the rows of ``x``."""
    adversarial_logits = bound(adversarial)
    if OuterLoss(loss) is OuterLoss.TRADES:
        return trades_loss(bound(x), adversarial_logits, y, beta)
    return softmax_cross_entropy(adversarial_logits, y)


@dataclass(frozen=True)
class ClassifierStep:
    objective: float
    adversarial_loss: float
    grads: list[np.ndarray]


def classifier_gradients(
    net: Network,
    x: np.ndarray,
    y,
    adversarial: np.ndarray,
    loss: OuterLoss = OuterLoss.CE,
    beta: float = 6.0,
) -> ClassifierStep:
    """Outer objective at fixed adversarial rows and its gradient for every parameter."""
    tape = Tape()
    bound = net.bind(tape)
    objective = outer_loss_graph(bound, x, y, adversarial, loss, beta)
    grads = tape.backward(objective)
    adversarial_ce = float(np.mean(losses_from_logits(net.predict(adversarial), y)))
    return ClassifierStep(objective.item(), adversarial_ce, [grads[p] for p in bound.params])


def explicit_classifier_gradients(
    net: Network,
    x: np.ndarray,
    y,
    params: TanhGaussianParams,
    tm: ThreatModel,
    r: np.ndarray,
    loss: OuterLoss = OuterLoss.CE,
    beta: float = 6.0,
) -> ClassifierStep:
    """Classifier gradient of ``J`` at fixed distribution parameters.

    ``r`` holds ``(k, n, d)`` noise draws; the entropy term does not depend on
    the classifier, so only the loss part contributes.
    """
    x2 = np.atleast_2d(x)
    k = r.shape[0]
    delta = tm.project(x2, push_forward(params, tm, r))
    adversarial = (x2 + delta).reshape(-1, x2.shape[-1])
    return classifier_gradients(
        net, np.tile(x2, (k, 1)), np.tile(np.atleast_1d(y), k), adversarial, loss, beta
    )
