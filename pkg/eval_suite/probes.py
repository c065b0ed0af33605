"""Analysis probes: sample diversity, loss landscapes, Hessian spectrum and PCA."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from attacks.base import loss_and_gradient, losses_from_logits
from attacks.distributional import optimize_explicit
from attacks.gradient import iterative_attack
from attacks.specs import preset
from eval_suite.exceptions import EvaluationError, NonConvergenceWarning
from grad_core.hessian import hvp
from grad_core.losses import LossKind, per_example_loss
from grad_core.nn import Network
from lib.numeric import make_rng, spawn_streams
from perturb_dist.explicit import sample_explicit
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)


def _as_cloud(samples, minimum: int) -> np.ndarray:
    cloud = np.asarray([np.ravel(s) for s in samples], dtype=np.float64)
    if cloud.shape[0] < minimum:
        raise EvaluationError(f"need at least {minimum} samples, got {cloud.shape[0]}")
    return cloud


def diversity_l2(samples) -> float:
    """Mean l2 distance over all unordered pairs of samples."""
    return float(np.mean(pdist(_as_cloud(samples, 2), metric="euclidean")))


@dataclass(frozen=True)
class LossSurface:
    offsets: np.ndarray
    values: np.ndarray
    gradient_direction: np.ndarray
    random_direction: np.ndarray
    degenerate: bool = False


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def _orthogonal_to(direction: np.ndarray, rng) -> np.ndarray:
    candidate = rng.standard_normal(direction.shape)
    candidate -= (candidate @ direction) * direction
    return _unit(candidate)


def loss_surface_grid(
    net: Network,
    x: np.ndarray,
    y: int,
    tm: ThreatModel,
    resolution: int = 41,
    rng=0,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
) -> LossSurface:
    """Loss over ``x + a * d_g + b * d_r`` for ``a, b`` on a grid spanning ``[-eps, eps]``.

    ``d_g`` is the normalized loss gradient at ``x``; ``d_r`` a normalized random
    direction orthogonal to it. A vanishing gradient falls back to two random
    orthogonal directions and is flagged.
    """
    if resolution < 3:
        raise EvaluationError("loss_surface_grid needs a resolution of at least 3")
    rng = make_rng(rng)
    x = np.asarray(x, dtype=np.float64).ravel()
    _, grad = loss_and_gradient(net, x, y, loss)
    norm = np.linalg.norm(grad)
    degenerate = norm == 0
    if degenerate:
        warnings.warn("loss gradient vanishes; using random directions", NonConvergenceWarning)
        d_g = _unit(rng.standard_normal(x.shape))
    else:
        d_g = grad / norm
    d_r = _orthogonal_to(d_g, rng)

    half = (resolution - 1) / 2
    offsets = tm.epsilon * (np.arange(resolution) - half) / half
    a, b = np.meshgrid(offsets, offsets, indexing="ij")
    points = x + a[..., None] * d_g + b[..., None] * d_r
    flat = points.reshape(-1, x.size)
    values = losses_from_logits(net.predict(flat), np.full(flat.shape[0], y), loss)
    return LossSurface(offsets, values.reshape(resolution, resolution), d_g, d_r, degenerate)


def dominant_hessian_eigenvalue(
    net: Network,
    x: np.ndarray,
    y: int,
    iters: int = 100,
    tol: float = 1e-8,
    rng=0,
    loss: LossKind | str = LossKind.CROSS_ENTROPY,
) -> float:
    """Magnitude of the dominant eigenvalue of the input Hessian of the loss.

    Power iteration on Hessian-vector products from a seeded random unit start,
    read out through the Rayleigh quotient. Stops once the iterate is an
    eigenvector or the quotient stops moving.
    """
    if iters < 1:
        raise EvaluationError("power iteration needs at least one step")
    x = np.asarray(x, dtype=np.float64).ravel()
    labels = np.atleast_1d(y)

    def loss_fn(logits):
        return per_example_loss(loss, logits, labels)

    v = _unit(make_rng(rng).standard_normal(x.shape))
    estimate = None
    for _ in range(iters):
        product = hvp(net, loss_fn, x, v)
        rayleigh = float(v @ product)
        residual = np.linalg.norm(product - rayleigh * v)
        if residual <= tol * max(1.0, abs(rayleigh)):
            return abs(rayleigh)
        if estimate is not None and abs(rayleigh - estimate) < tol:
            return abs(rayleigh)
        estimate = rayleigh
        norm = np.linalg.norm(product)
        if norm == 0:
            return 0.0
        v = product / norm
    warnings.warn(f"power iteration did not settle within {iters} steps", NonConvergenceWarning)
    return abs(estimate)


@dataclass(frozen=True)
class PcaProjection:
    coordinates: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray


def _leading_direction(covariance, rng, against=None, iters: int = 500, tol: float = 1e-12):
    if against is None:
        v = _unit(rng.standard_normal(covariance.shape[0]))
    else:
        v = _orthogonal_to(against, rng)
    for _ in range(iters):
        w = covariance @ v
        if against is not None:
            w -= (w @ against) * against
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return v, 0.0
        w /= norm
        settled = np.linalg.norm(w - v) < tol
        v = w
        if settled:
            break
    return v, float(v @ covariance @ v)


def pca_project(samples, rng=0) -> PcaProjection:
    """Project centered samples onto the top two principal directions.

    Directions come from power iteration on the sample covariance, the second
    deflated against the first.
    """
    cloud = _as_cloud(samples, 3)
    if cloud.shape[1] < 2:
        raise EvaluationError("pca_project needs samples of dimension at least 2")
    centered = cloud - cloud.mean(axis=0)
    if not np.any(centered):
        raise EvaluationError("all samples coincide; there is nothing to project")
    covariance = centered.T @ centered / (cloud.shape[0] - 1)
    rng = make_rng(rng)
    first, first_variance = _leading_direction(covariance, rng)
    second, second_variance = _leading_direction(covariance, rng, against=first)
    if second_variance > first_variance:
        first, second = second, first
        first_variance, second_variance = second_variance, first_variance
    components = np.stack([first, second])
    return PcaProjection(
        centered @ components.T,
        np.array([max(first_variance, 0.0), max(second_variance, 0.0)]),
        components,
    )


def attack_samples(
    net: Network,
    x: np.ndarray,
    y: int,
    tm: ThreatModel,
    count: int = 20,
    rng=0,
    lam: float = 0.01,
    steps: int = 20,
    k: int = 10,
    lr: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Perturbations from a fitted explicit distribution and PGD endpoints from restarts.

    Returns two ``(count, d)`` arrays: draws from the distribution fitted by the
    inner ascent at ``x``, and the final perturbations of ``count`` independently
    started PGD-20 runs.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    stream, *restarts = spawn_streams(make_rng(rng), count + 1)
    params, _ = optimize_explicit(net, x[None], [y], tm, lam, steps, k, lr, stream)
    draws, _ = sample_explicit(params, tm, stream, k=count)
    distribution = tm.project(x[None], draws[:, 0])
    pgd = preset("pgd20")
    endpoints = np.stack([iterative_attack(net, x, y, tm, pgd, r).delta for r in restarts])
    return distribution, endpoints
