"""Explicit tanh-Gaussian perturbation distributions.

A sample is ``delta = epsilon * tanh(mu + sigma * r)`` with ``r ~ N(0, I)``;
its negative log density follows from the change of variables through
``tanh`` and the scaling by ``epsilon``.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from grad_core import ops
from grad_core.exceptions import ShapeError
from grad_core.losses import LossKind, per_example_loss
from grad_core.nn import Activation, BoundNetwork, Network
from grad_core.tape import Tape, Var
from lib.numeric import make_rng
from perturb_dist.exceptions import DistributionError
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)

MU_BOUND = 4.0
SIGMA_FLOOR = 1e-3
SIGMA_CEIL = 4.0
# tanh(15) is still below 1 in 64-bit, so samples stay strictly inside the ball
TANH_CLAMP = 15.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
LOG_2 = np.log(2.0)


def softplus(value):
    return np.logaddexp(0.0, value)


def inverse_softplus(value):
    value = np.asarray(value, dtype=np.float64)
    return value + np.log(-np.expm1(-value))


@dataclass(frozen=True)
class TanhGaussianParams:
    """Location ``mu`` and free scale parameter ``sigma_raw`` (``sigma = softplus(sigma_raw)``).

    Both arrays share one shape: ``(d,)`` for a single example or ``(n, d)`` for
    a batch of independent per-example distributions.
    """

    mu: np.ndarray
    sigma_raw: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.sigma_raw):
            raise DistributionError(
                f"mu {np.shape(self.mu)} and sigma_raw {np.shape(self.sigma_raw)} differ"
            )

    @classmethod
    def initial(cls, shape, dtype=np.float64) -> "TanhGaussianParams":
        """``mu = 0`` and ``sigma = 1`` everywhere."""
        return cls(
            np.zeros(shape, dtype=dtype),
            np.full(shape, inverse_softplus(1.0), dtype=dtype),
        )

    @classmethod
    def from_sigma(cls, mu, sigma) -> "TanhGaussianParams":
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise DistributionError("sigma must be positive")
        return cls(np.asarray(mu, dtype=np.float64), inverse_softplus(sigma))

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.sigma_raw)

    @property
    def dim(self) -> int:
        return np.shape(self.mu)[-1]

    def clipped(self) -> "TanhGaussianParams":
        """Clamp ``|mu| <= 4`` and ``1e-3 <= sigma <= 4``; in-range entries are untouched."""
        sigma = self.sigma
        inside = (sigma >= SIGMA_FLOOR) & (sigma <= SIGMA_CEIL)
        raw = np.where(
            inside,
            self.sigma_raw,
            inverse_softplus(np.clip(sigma, SIGMA_FLOOR, SIGMA_CEIL)),
        )
        return TanhGaussianParams(np.clip(self.mu, -MU_BOUND, MU_BOUND), raw.astype(self.mu.dtype))

    def within_bounds(self, atol: float = 1e-12) -> bool:
        sigma = self.sigma
        return bool(
            np.all(np.abs(self.mu) <= MU_BOUND + atol)
            and np.all(sigma >= SIGMA_FLOOR - atol)
            and np.all(sigma <= SIGMA_CEIL + atol)
        )


def _log_sech_squared(u):
    """``log(1 - tanh(u)^2)`` without forming ``tanh``; valid for any finite ``u``."""
    return 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


def sample_explicit(
    params: TanhGaussianParams, tm: ThreatModel, rng, k: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``delta`` together with the standard-normal noise ``r`` that produced it.

    With ``k`` set, a leading sample axis of length ``k`` is added.
    """
    rng = make_rng(rng)
    shape = np.shape(params.mu) if k is None else (k,) + np.shape(params.mu)
    r = rng.standard_normal(shape)
    return push_forward(params, tm, r), r


def push_forward(params: TanhGaussianParams, tm: ThreatModel, r: np.ndarray) -> np.ndarray:
    """The perturbation produced by standard-normal noise ``r``."""
    u = np.clip(params.mu + params.sigma * r, -TANH_CLAMP, TANH_CLAMP)
    return tm.epsilon * np.tanh(u)


def neg_log_density(params: TanhGaussianParams, tm: ThreatModel, r: np.ndarray):
    """``-log p(delta)`` of the sample produced by noise ``r``, summed over the last axis."""
    sigma = params.sigma
    u = np.clip(params.mu + sigma * r, -TANH_CLAMP, TANH_CLAMP)
    terms = 0.5 * r * r + HALF_LOG_2PI + np.log(sigma) + _log_sech_squared(u) + np.log(tm.epsilon)
    total = np.sum(terms, axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def explicit_density(delta, mu, sigma, epsilon: float):
    """Closed-form 1-D density of ``epsilon * tanh(mu + sigma * r)``; zero off support."""
    t = np.asarray(delta, dtype=np.float64) / epsilon
    inside = np.abs(t) < 1.0
    safe = np.where(inside, t, 0.0)
    density = stats.norm.pdf(np.arctanh(safe), loc=mu, scale=sigma) / (epsilon * (1.0 - safe**2))
    return np.where(inside, density, 0.0)


def entropy_estimate(params: TanhGaussianParams, tm: ThreatModel, k: int, rng):
    """Monte Carlo ``H(p) = E[-log p(delta)]`` from ``k`` draws, per example."""
    if k < 1:
        raise DistributionError("entropy_estimate needs k >= 1")
    _, r = sample_explicit(params, tm, rng, k=k)
    estimate = np.mean(neg_log_density(params, tm, r), axis=0)
    return float(estimate) if np.ndim(estimate) == 0 else estimate


def reparameterize(mu: Var, sigma: Var, r: np.ndarray, tm: ThreatModel) -> tuple[Var, Var]:
    """Tape version of the sampler; returns ``delta`` and the clamped pre-tanh value."""
    u = ops.clip(mu + sigma * r, -TANH_CLAMP, TANH_CLAMP)
    return tm.epsilon * ops.tanh(u), u


def neg_log_density_graph(sigma: Var, u: Var, r: np.ndarray, tm: ThreatModel) -> Var:
    log_sech_squared = 2.0 * (LOG_2 - u - ops.softplus(-2.0 * u))
    terms = 0.5 * r * r + ops.log(sigma) + log_sech_squared
    constant = r.shape[-1] * (HALF_LOG_2PI + np.log(tm.epsilon))
    return ops.sum(terms, axis=-1) + constant


def perturbed_rows(x: np.ndarray, delta: Var, tm: ThreatModel) -> Var:
    """``x + delta`` flattened to rows and clipped to the pixel box when one is set."""
    adv = ops.reshape(delta + x, (-1, x.shape[-1]))
    if tm.pixel_box is not None:
        adv = ops.clip(adv, *tm.pixel_box)
    return adv


@dataclass
class ExplicitTerms:
    """Per-sample graph terms, each shaped ``(k, n)``."""

    per_sample: Var
    loss: Var
    neg_log_density: Var
    delta: Var


def explicit_objective(
    bound: BoundNetwork,
    x: np.ndarray,
    y,
    mu,
    sigma,
    r: np.ndarray,
    tm: ThreatModel,
    lam: float,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
    natural_logits: np.ndarray | None = None,
) -> ExplicitTerms:
    """Record ``L(f(x + delta), y) - lam * log p(delta)`` for every noise draw in ``r``.

    ``r`` has shape ``(k, n, d)``; ``mu`` and ``sigma`` may be vars or arrays
    broadcastable to ``(n, d)``.
    """
    x = np.atleast_2d(x)
    k, n = r.shape[0], x.shape[0]
    if r.shape[1:] != x.shape:
        raise ShapeError(f"noise {r.shape} does not match inputs {x.shape}")
    tape = bound.params[0].tape
    mu = mu if isinstance(mu, Var) else tape.constant(mu)
    sigma = sigma if isinstance(sigma, Var) else tape.constant(sigma)
    if mu.shape[-1] != x.shape[-1]:
        raise ShapeError(f"distribution dim {mu.shape[-1]} does not match input dim {x.shape[-1]}")
    delta, u = reparameterize(mu, sigma, r, tm)
    logits = bound(perturbed_rows(x, delta, tm))
    labels = np.tile(np.atleast_1d(y), k)
    natural = None if natural_logits is None else np.tile(np.atleast_2d(natural_logits), (k, 1))
    loss_rows = ops.reshape(per_example_loss(loss, logits, labels, natural), (k, n))
    nld = neg_log_density_graph(sigma, u, r, tm)
    return ExplicitTerms(loss_rows + lam * nld, loss_rows, nld, delta)


@dataclass(frozen=True)
class ObjectiveEstimate:
    """Monte Carlo estimate of the entropy-regularized objective for each example."""

    value: np.ndarray
    loss: np.ndarray
    entropy: np.ndarray
    samples: np.ndarray
    noise: np.ndarray
    grad_mu: np.ndarray
    grad_sigma_raw: np.ndarray

    @property
    def total(self) -> float:
        return float(np.mean(self.value))


def inner_objective_exp(
    net: Network,
    x: np.ndarray,
    y,
    params: TanhGaussianParams,
    tm: ThreatModel,
    lam: float,
    k: int,
    rng,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
    natural_logits: np.ndarray | None = None,
) -> ObjectiveEstimate:
    """``J = mean_k [L(f(x + delta), y) - lam * log p(delta)]`` with pathwise gradients.

    Gradients are taken w.r.t. ``params`` only; the classifier is a constant.
    """
    if k < 1:
        raise DistributionError("inner_objective_exp needs k >= 1")
    if lam < 0:
        raise DistributionError("the entropy weight must be non-negative")
    x2 = np.atleast_2d(x)
    if params.dim != x2.shape[-1]:
        raise ShapeError(f"distribution dim {params.dim} does not match input dim {x2.shape[-1]}")
    r = make_rng(rng).standard_normal((k,) + x2.shape)

    tape = Tape()
    mu = tape.leaf(params.mu, name="mu")
    sigma_raw = tape.leaf(params.sigma_raw, name="sigma_raw")
    bound = net.bind(tape, [tape.constant(p) for p in net.parameters()])
    terms = explicit_objective(
        bound, x2, y, mu, ops.softplus(sigma_raw), r, tm, lam, loss, natural_logits
    )
    per_example = ops.mean(terms.per_sample, axis=0)
    grads = tape.backward(ops.sum(per_example))
    return ObjectiveEstimate(
        value=per_example.value,
        loss=terms.loss.value.mean(axis=0),
        entropy=terms.neg_log_density.value.mean(axis=0),
        samples=terms.per_sample.value,
        noise=r,
        grad_mu=grads[mu],
        grad_sigma_raw=grads[sigma_raw],
    )


def generator_inputs(x: np.ndarray, g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    x, g1, g2 = np.atleast_2d(x), np.atleast_2d(g1), np.atleast_2d(g2)
    if not x.shape == g1.shape == g2.shape:
        raise ShapeError(f"generator inputs differ in shape: {x.shape}, {g1.shape}, {g2.shape}")
    return np.concatenate([x, g1, g2], axis=-1)


def explicit_generator(dim: int, rng, hidden=(64,)) -> Network:
    """Dense generator ``[x, g1, g2] -> [mu, sigma_raw]``."""
    return Network.mlp([3 * dim, *hidden, 2 * dim], make_rng(rng), hidden=Activation.RELU)


def _check_generator(gen: Network, dim: int):
    if gen.input_dim != 3 * dim or gen.output_dim != 2 * dim:
        raise ShapeError(
            f"explicit generator maps {gen.input_dim} -> {gen.output_dim}, "
            f"inputs of dim {dim} need {3 * dim} -> {2 * dim}"
        )


def amortized_explicit_graph(
    bound_gen: BoundNetwork, x: np.ndarray, g1: np.ndarray, g2: np.ndarray
) -> tuple[Var, Var]:
    """Generator heads on a tape: clipped ``mu`` and clipped ``sigma`` per row."""
    dim = np.shape(x)[-1]
    _check_generator(bound_gen.network, dim)
    out = bound_gen(generator_inputs(x, g1, g2))
    mu = ops.clip(ops.getitem(out, (slice(None), slice(0, dim))), -MU_BOUND, MU_BOUND)
    sigma = ops.softplus(ops.getitem(out, (slice(None), slice(dim, 2 * dim))))
    return mu, ops.clip(sigma, SIGMA_FLOOR, SIGMA_CEIL)


def amortized_explicit_params(
    gen: Network, x: np.ndarray, g1: np.ndarray, g2: np.ndarray
) -> TanhGaussianParams:
    dim = np.shape(x)[-1]
    _check_generator(gen, dim)
    out = gen.predict(generator_inputs(x, g1, g2))
    params = TanhGaussianParams(out[:, :dim], out[:, dim:]).clipped()
    if np.ndim(x) == 1:
        params = TanhGaussianParams(params.mu[0], params.sigma_raw[0])
    return params
