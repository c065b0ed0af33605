import logging

import numpy as np

from attacks.base import AdvResult, QueryModel
from attacks.exceptions import AttackError
from attacks.specs import AttackKind, AttackSpec
from grad_core.losses import LossKind
from grad_core.nn import Network
from grad_core.optim import OptState, adam_step
from lib.numeric import make_rng
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)


def spsa_gradient(
    model: QueryModel,
    x: np.ndarray,
    y,
    kind: LossKind | str,
    batch: int,
    perturb_size: float,
    rng,
    natural_logits=None,
) -> np.ndarray:
    """Loss-gradient estimate from ``batch`` paired Rademacher probes per row of ``x``."""
    rng = make_rng(rng)
    x2 = np.atleast_2d(x)
    rows, dim = x2.shape
    signs = rng.integers(0, 2, size=(batch, rows, dim)) * 2.0 - 1.0
    probes = perturb_size * signs
    labels = np.tile(np.atleast_1d(y), batch)
    natural = None
    if natural_logits is not None:
        natural = np.tile(np.atleast_2d(natural_logits), (batch, 1))
    upper = model.loss((x2 + probes).reshape(-1, dim), labels, kind, natural)
    lower = model.loss((x2 - probes).reshape(-1, dim), labels, kind, natural)
    slopes = ((upper - lower) / (2.0 * perturb_size)).reshape(batch, rows, 1)
    # dividing by a +-1 probe is multiplying by it
    return np.mean(slopes * signs, axis=0).reshape(np.shape(x))


def spsa_attack(
    net: Network, x: np.ndarray, y, tm: ThreatModel, spec: AttackSpec, rng=None
) -> AdvResult:
    """Gradient-free ascent with SPSA estimates and Adam; rows stop once misclassified."""
    if spec.kind is not AttackKind.SPSA:
        raise AttackError(f"spsa_attack cannot run a {spec.kind} spec")
    rng = make_rng(rng)
    tm = spec.threat_model(tm)
    config = spec.spsa
    model = QueryModel(net)
    shape = np.shape(x)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(y)
    natural = model.logits(x) if spec.loss is LossKind.KL_TO_NATURAL else None

    delta = np.zeros_like(x)
    state = OptState.adam([delta], lr=config.lr)
    active = np.ones(labels.shape, dtype=bool)
    trace = []
    for iteration in range(config.iters):
        if config.early_stop:
            active &= model.classify(x + delta) == labels
            if not active.any():
                logger.debug("attack=%s early_stop iteration=%d", spec.label, iteration)
                break
        grad = np.zeros_like(x)
        grad[active] = spsa_gradient(
            model,
            (x + delta)[active],
            labels[active],
            spec.loss,
            config.batch,
            config.perturb_size,
            rng,
            None if natural is None else natural[active],
        )
        (stepped,), state = adam_step([delta], [grad], state, maximize=True)
        delta = np.where(active[:, None], tm.project(x, stepped), delta)
        trace.append(float(np.mean(model.loss(x + delta, labels, spec.loss, natural))))
    success = model.classify(x + delta) != labels
    return AdvResult(delta.reshape(shape), success, trace, queries=model.queries)
