import numpy as np

from attacks.base import AdvResult, misclassified
from attacks.exceptions import AttackError, ForeignClassMissing
from attacks.specs import AttackKind, AttackSpec
from grad_core import ops
from grad_core.nn import Network
from grad_core.tape import Tape
from lib.numeric import make_rng
from perturb_dist.threat import ThreatModel


def cosine_and_gradient(net: Network, x_adv: np.ndarray, target_features: np.ndarray):
    """Row-wise cosine similarity of penultimate features and its input gradient."""
    tape = Tape()
    x_var = tape.leaf(np.atleast_2d(x_adv), name="x")
    bound = net.bind(tape, [tape.constant(p) for p in net.parameters()])
    cosine = ops.cosine_similarity(bound.features(x_var), np.atleast_2d(target_features))
    grads = tape.backward(ops.sum(cosine))
    return cosine.value, grads[x_var].reshape(np.shape(x_adv))


def _target_orders(labels, pool_y, rng) -> list[np.ndarray]:
    orders = []
    for label in labels:
        foreign = np.flatnonzero(pool_y != label)
        if foreign.size == 0:
            raise ForeignClassMissing(f"no pool example outside class {label}")
        orders.append(rng.permutation(foreign))
    return orders


def feature_attack(
    net: Network,
    x: np.ndarray,
    y,
    pool_x: np.ndarray,
    pool_y: np.ndarray,
    tm: ThreatModel,
    spec: AttackSpec,
    rng=None,
) -> AdvResult:
    """Push features of ``x + delta`` away from those of foreign-class targets.

    One signed-gradient descent on cosine similarity per sampled target; an
    example counts as broken when any of its runs misclassifies.
    """
    if spec.kind is not AttackKind.FEATURE:
        raise AttackError(f"feature_attack cannot run a {spec.kind} spec")
    rng = make_rng(rng)
    tm = spec.threat_model(tm)
    config = spec.feature
    alpha = config.step_size if config.step_size is not None else tm.epsilon / 8
    shape = np.shape(x)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(y)
    pool_x, pool_y = np.atleast_2d(pool_x), np.asarray(pool_y)
    orders = _target_orders(labels, pool_y, rng)

    success = np.zeros(labels.shape, dtype=bool)
    best_delta = np.zeros_like(x)
    best_cosine = np.full(labels.shape, np.inf)
    trace = []
    for run in range(config.num_targets):
        targets = np.array([order[run % order.size] for order in orders])
        target_features = net.features(pool_x[targets])
        if config.random_start:
            delta = tm.project(x, rng.uniform(-tm.epsilon, tm.epsilon, size=x.shape))
        else:
            delta = np.zeros_like(x)
        for _ in range(config.steps):
            _, grad = cosine_and_gradient(net, x + delta, target_features)
            delta = tm.project(x, delta - alpha * np.sign(grad))
        cosine, _ = cosine_and_gradient(net, x + delta, target_features)
        fooled = misclassified(net, x + delta, labels)
        take = (fooled & ~success) | (~success & ~fooled & (cosine < best_cosine))
        best_delta = np.where(take[:, None], delta, best_delta)
        best_cosine = np.where(take, cosine, best_cosine)
        success |= fooled
        trace.append(float(np.mean(cosine)))
    return AdvResult(best_delta.reshape(shape), success, trace)
