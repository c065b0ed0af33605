from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Sequence

import numpy as np

from grad_core.exceptions import ShapeError


class OptimizerKind(StrEnum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


@dataclass(frozen=True)
class OptState:
    """Optimizer hyperparameters plus per-parameter slots.

    ``slots`` mirrors the parameter list: one momentum buffer per parameter for
    SGD, ``(first, second)`` moment pairs for Adam.
    """

    kind: OptimizerKind
    lr: float
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    slots: tuple = field(default=(), repr=False)

    @classmethod
    def sgd(cls, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        slots = tuple(np.zeros_like(p) for p in params)
        return cls(
            OptimizerKind.SGD_MOMENTUM,
            lr=lr,
            momentum=momentum,
            weight_decay=weight_decay,
            slots=slots,
        )

    @classmethod
    def adam(cls, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay=0.0):
        slots = tuple((np.zeros_like(p), np.zeros_like(p)) for p in params)
        return cls(
            OptimizerKind.ADAM,
            lr=lr,
            betas=tuple(betas),
            eps=eps,
            weight_decay=weight_decay,
            slots=slots,
        )

    def with_lr(self, lr: float) -> "OptState":
        return replace(self, lr=lr)


def _check_aligned(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptState):
    if not (len(params) == len(grads) == len(state.slots)):
        raise ShapeError(
            f"{len(params)} params, {len(grads)} grads, {len(state.slots)} optimizer slots"
        )
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")


def sgd_momentum_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptState
) -> tuple[list[np.ndarray], OptState]:
    """``v <- mu*v + g + wd*theta``; ``theta <- theta - lr*v``."""
    if state.kind is not OptimizerKind.SGD_MOMENTUM:
        raise ValueError(f"sgd_momentum_step called with a {state.kind} state")
    _check_aligned(params, grads, state)
    new_params, new_slots = [], []
    for theta, g, velocity in zip(params, grads, state.slots):
        velocity = state.momentum * velocity + g + state.weight_decay * theta
        new_params.append(theta - state.lr * velocity)
        new_slots.append(velocity)
    return new_params, replace(state, step=state.step + 1, slots=tuple(new_slots))


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptState,
    maximize: bool = False,
) -> tuple[list[np.ndarray], OptState]:
    """Bias-corrected Adam; ``maximize`` ascends instead of descending."""
    if state.kind is not OptimizerKind.ADAM:
        raise ValueError(f"adam_step called with a {state.kind} state")
    _check_aligned(params, grads, state)
    step = state.step + 1
    beta1, beta2 = state.betas
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    new_params, new_slots = [], []
    for theta, g, (first, second) in zip(params, grads, state.slots):
        if maximize:
            g = -g
        g = g + state.weight_decay * theta
        first = beta1 * first + (1.0 - beta1) * g
        second = beta2 * second + (1.0 - beta2) * g * g
        update = (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        new_params.append(theta - state.lr * update)
        new_slots.append((first, second))
    return new_params, replace(state, step=step, slots=tuple(new_slots))


def step_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """Learning rate after multiplying by ``gamma`` at every passed milestone epoch."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
