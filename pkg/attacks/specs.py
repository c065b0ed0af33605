from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt

from grad_core.losses import LossKind
from perturb_dist.threat import ThreatModel


class AttackKind(StrEnum):
    IDENTITY = "identity"
    FGSM = "fgsm"
    ITERATIVE = "iterative"
    SPSA = "spsa"
    FEATURE = "feature"
    DIST_EXP = "dist_exp"
    DIST_AMORTIZED = "dist_amortized"


class SpsaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch: PositiveInt = 128
    perturb_size: PositiveFloat = 0.001
    lr: PositiveFloat = 0.01
    iters: PositiveInt = 100
    early_stop: bool = True


class FeatureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_targets: PositiveInt = 8
    steps: PositiveInt = 20
    step_size: PositiveFloat | None = None
    random_start: bool = False


class ExplicitConfig(BaseModel):
    """Inner ascent on a per-example tanh-Gaussian.

    ``steps`` Adam steps with ``samples`` draws each.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    lam: NonNegativeFloat = 0.01
    steps: PositiveInt = 20
    samples: PositiveInt = 10
    lr: PositiveFloat = 0.3
    betas: tuple[float, float] = (0.0, 0.0)


class AttackSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = ""
    kind: AttackKind
    epsilon: PositiveFloat | None = None
    step_size: PositiveFloat | None = None
    steps: PositiveInt = 20
    momentum_decay: NonNegativeFloat = 0.0
    loss: LossKind = LossKind.CROSS_ENTROPY
    random_start: bool = True
    restarts: PositiveInt = 1
    targeted: bool = False
    spsa: SpsaConfig = Field(default_factory=SpsaConfig)
    feature: FeatureConfig = Field(default_factory=FeatureConfig)
    explicit: ExplicitConfig = Field(default_factory=ExplicitConfig)

    @property
    def label(self) -> str:
        return self.name or str(self.kind)

    def threat_model(self, tm: ThreatModel) -> ThreatModel:
        if self.epsilon is None:
            return tm
        return tm.model_copy(update={"epsilon": self.epsilon})

    def alpha(self, epsilon: float) -> float:
        return self.step_size if self.step_size is not None else epsilon / 4


PRESETS = {
    "natural": {"kind": AttackKind.IDENTITY},
    "fgsm": {"kind": AttackKind.FGSM},
    "pgd20": {"kind": AttackKind.ITERATIVE, "steps": 20},
    "pgd100": {"kind": AttackKind.ITERATIVE, "steps": 100},
    "mim20": {
        "kind": AttackKind.ITERATIVE,
        "steps": 20,
        "momentum_decay": 1.0,
        "random_start": False,
    },
    "cw30": {"kind": AttackKind.ITERATIVE, "steps": 30, "loss": LossKind.CW_MARGIN},
    "feature": {"kind": AttackKind.FEATURE},
    "feature_full": {
        "kind": AttackKind.FEATURE,
        "feature": {"num_targets": 200, "steps": 50, "random_start": True},
    },
    "spsa": {"kind": AttackKind.SPSA, "loss": LossKind.CW_MARGIN},
    "exp": {"kind": AttackKind.DIST_EXP, "explicit": {"steps": 20, "samples": 10}},
    "exp_am": {"kind": AttackKind.DIST_AMORTIZED},
    "imp_am": {"kind": AttackKind.DIST_AMORTIZED},
}


def preset(name: str, **overrides) -> AttackSpec:
    """Named evaluation attack; ``overrides`` replace preset fields."""
    if name not in PRESETS:
        raise KeyError(f"unknown attack preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return AttackSpec(**{"name": name, **PRESETS[name], **overrides})
