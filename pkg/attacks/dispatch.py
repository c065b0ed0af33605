import numpy as np

from attacks.base import AdvResult, misclassified
from attacks.distributional import AmortizedGenerator, dist_attack_amortized, dist_attack_exp
from attacks.exceptions import AttackError
from attacks.feature import feature_attack
from attacks.gradient import fgsm, iterative_attack
from attacks.specs import AttackKind, AttackSpec
from attacks.spsa import spsa_attack
from grad_core.nn import Network
from lib.numeric import make_rng
from perturb_dist.threat import ThreatModel


def run_attack(
    spec: AttackSpec,
    net: Network,
    x: np.ndarray,
    y,
    tm: ThreatModel,
    rng=None,
    pool: tuple[np.ndarray, np.ndarray] | None = None,
    generator: AmortizedGenerator | None = None,
) -> AdvResult:
    """Run any attack kind against ``net``; ``pool`` feeds the feature attack."""
    rng = make_rng(rng)
    match spec.kind:
        case AttackKind.IDENTITY:
            delta = np.zeros_like(np.asarray(x, dtype=np.float64))
            return AdvResult(delta, misclassified(net, x, y))
        case AttackKind.FGSM:
            return fgsm(net, x, y, spec.threat_model(tm), spec.loss, spec.targeted)
        case AttackKind.ITERATIVE:
            return iterative_attack(net, x, y, tm, spec, rng)
        case AttackKind.SPSA:
            return spsa_attack(net, x, y, tm, spec, rng)
        case AttackKind.FEATURE:
            if pool is None:
                raise AttackError("the feature attack needs a target pool")
            return feature_attack(net, x, y, pool[0], pool[1], tm, spec, rng)
        case AttackKind.DIST_EXP:
            config = spec.explicit
            _, result = dist_attack_exp(
                net,
                x,
                y,
                spec.threat_model(tm),
                lam=config.lam,
                steps=config.steps,
                k=config.samples,
                lr=config.lr,
                rng=rng,
                betas=config.betas,
                loss=spec.loss,
            )
            return result
        case AttackKind.DIST_AMORTIZED:
            if generator is None:
                raise AttackError(f"attack {spec.label} needs a trained generator")
            return dist_attack_amortized(generator, net, x, y, spec.threat_model(tm), rng)
    raise AttackError(f"unsupported attack kind {spec.kind}")
