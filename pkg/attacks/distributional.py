import logging
from dataclasses import dataclass

import numpy as np

from attacks.base import AdvResult, losses_from_logits, misclassified
from attacks.exceptions import UntrainedGeneratorError
from attacks.gradient import loss_gradients
from grad_core.losses import LossKind
from grad_core.nn import Network
from grad_core.optim import OptState, adam_step
from lib.numeric import make_rng
from perturb_dist.explicit import (
    TanhGaussianParams,
    amortized_explicit_params,
    inner_objective_exp,
    sample_explicit,
)
from perturb_dist.implicit import ImplicitSampler, sample_implicit
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)


def optimize_explicit(
    net: Network,
    x: np.ndarray,
    y,
    tm: ThreatModel,
    lam: float,
    steps: int,
    k: int,
    lr: float,
    rng,
    betas=(0.0, 0.0),
    init: TanhGaussianParams | None = None,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
    natural_logits: np.ndarray | None = None,
) -> tuple[TanhGaussianParams, list[float]]:
    """Adam ascent on per-example tanh-Gaussian parameters; clipped after every step.

    Returns the final parameters and the objective estimate seen at each step.
    """
    rng = make_rng(rng)
    params = init if init is not None else TanhGaussianParams.initial(np.shape(x))
    state = OptState.adam([params.mu, params.sigma_raw], lr=lr, betas=betas)
    trace = []
    for _ in range(steps):
        estimate = inner_objective_exp(
            net, x, y, params, tm, lam, k, rng, loss=loss, natural_logits=natural_logits
        )
        trace.append(estimate.total)
        (mu, sigma_raw), state = adam_step(
            [params.mu, params.sigma_raw],
            [estimate.grad_mu, estimate.grad_sigma_raw],
            state,
            maximize=True,
        )
        params = TanhGaussianParams(mu, sigma_raw).clipped()
    return params, trace


def _best_sample(net, x, labels, samples, kind, natural_logits=None):
    """Per example, the draw that misclassifies (first) or has the highest loss."""
    k, n, dim = samples.shape
    adv = (x + samples).reshape(-1, dim)
    logits = net.predict(adv)
    natural = None if natural_logits is None else np.tile(natural_logits, (k, 1))
    losses = losses_from_logits(logits, np.tile(labels, k), kind, natural).reshape(k, n)
    fooled = (np.argmax(logits, axis=-1) != np.tile(labels, k)).reshape(k, n)
    choice = np.argmax(np.where(fooled, np.inf, losses), axis=0)
    rows = np.arange(n)
    return samples[choice, rows], fooled[choice, rows]


def dist_attack_exp(
    net: Network,
    x: np.ndarray,
    y,
    tm: ThreatModel,
    lam: float = 0.01,
    steps: int = 20,
    k: int = 10,
    lr: float = 0.3,
    rng=None,
    betas=(0.0, 0.0),
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
) -> tuple[TanhGaussianParams, AdvResult]:
    """Fit an explicit adversarial distribution per example and attack with its best draw."""
    rng = make_rng(rng)
    shape = np.shape(x)
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(y)
    natural = net.predict(x2) if LossKind(loss) is LossKind.KL_TO_NATURAL else None
    params, trace = optimize_explicit(
        net, x2, labels, tm, lam, steps, k, lr, rng, betas, loss=loss, natural_logits=natural
    )
    samples, _ = sample_explicit(params, tm, rng, k=k)
    if tm.pixel_box is not None:
        samples = tm.project(x2, samples)
    delta, _ = _best_sample(net, x2, labels, samples, loss, natural)
    result = AdvResult(delta.reshape(shape), misclassified(net, x2 + delta, labels), trace)
    if len(shape) == 1:
        params = TanhGaussianParams(params.mu[0], params.sigma_raw[0])
    return params, result


@dataclass(frozen=True)
class AmortizedGenerator:
    """A generator bundled with how many updates it received against its classifier.

    ``model`` is either an explicit generator network emitting ``[mu, sigma_raw]``
    or an :class:`ImplicitSampler`.
    """

    model: Network | ImplicitSampler
    trained_steps: int = 0

    @property
    def implicit(self) -> bool:
        return isinstance(self.model, ImplicitSampler)


def dist_attack_amortized(
    generator: AmortizedGenerator, net: Network, x: np.ndarray, y, tm: ThreatModel, rng=None
) -> AdvResult:
    """One draw from the generator's distribution for every example."""
    if generator.trained_steps < 1:
        raise UntrainedGeneratorError("the generator was never trained against this classifier")
    rng = make_rng(rng)
    shape = np.shape(x)
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(y)
    g1, g2 = loss_gradients(net, x2, labels, tm)
    if generator.implicit:
        delta, _ = sample_implicit(generator.model, x2, g1, g2, tm, rng)
    else:
        params = amortized_explicit_params(generator.model, x2, g1, g2)
        delta, _ = sample_explicit(params, tm, rng)
    delta = tm.project(x2, delta)
    return AdvResult(delta.reshape(shape), misclassified(net, x2 + delta, labels))
