from enum import StrEnum

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
)

from grad_core.losses import LossKind
from perturb_dist.threat import ThreatModel


class Method(StrEnum):
    STANDARD = "standard"
    AT_FGSM = "at_fgsm"
    AT_PGD = "at_pgd"
    ADT_EXP = "adt_exp"
    ADT_EXP_AM = "adt_exp_am"
    ADT_IMP_AM = "adt_imp_am"

    @property
    def amortized(self) -> bool:
        return self in (Method.ADT_EXP_AM, Method.ADT_IMP_AM)


class OuterLoss(StrEnum):
    CE = "ce"
    TRADES = "trades"


class ClassifierOptimizer(BaseModel):
    """SGD with momentum; the rate is multiplied by ``gamma`` at each milestone epoch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: PositiveFloat = 0.1
    momentum: NonNegativeFloat = 0.9
    weight_decay: NonNegativeFloat = 2e-4
    milestones: tuple[NonNegativeInt, ...] = ()
    gamma: PositiveFloat = 0.1


class InnerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: PositiveInt = 7
    samples: PositiveInt = 5
    lam: NonNegativeFloat = 0.01
    lr: PositiveFloat = 0.3
    betas: tuple[float, float] = (0.0, 0.0)


class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: PositiveFloat = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)


class TrainSpec(BaseModel):
    """Everything needed to reproduce one training run from a seed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = Method.STANDARD
    loss: OuterLoss = OuterLoss.CE
    beta: PositiveFloat = 6.0
    epochs: PositiveInt = 100
    batch_size: PositiveInt = 64
    hidden: tuple[PositiveInt, ...] = (16, 16)
    classifier: ClassifierOptimizer = Field(default_factory=ClassifierOptimizer)
    inner: InnerConfig = Field(default_factory=InnerConfig)
    generator: AdamConfig = Field(default_factory=AdamConfig)
    posterior: AdamConfig = Field(default_factory=AdamConfig)
    generator_hidden: tuple[PositiveInt, ...] = (64,)
    z_dim: PositiveInt = 8
    threat_model: ThreatModel = Field(default_factory=ThreatModel)
    seed: NonNegativeInt = 0

    @property
    def inner_loss(self) -> LossKind:
        """Loss maximized by the inner problem: the KL term under TRADES."""
        if self.loss is OuterLoss.TRADES:
            return LossKind.KL_TO_NATURAL
        return LossKind.CROSS_ENTROPY

