"""Implicit perturbation samplers and the variational bound on their entropy."""

from dataclasses import dataclass

import numpy as np

from grad_core import ops
from grad_core.exceptions import ShapeError
from grad_core.nn import Activation, BoundNetwork, Network
from grad_core.tape import Var
from lib.numeric import make_rng
from perturb_dist.exceptions import DistributionError
from perturb_dist.explicit import HALF_LOG_2PI, TANH_CLAMP, generator_inputs
from perturb_dist.threat import ThreatModel

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class ImplicitSampler:
    """``delta = epsilon * tanh(g([z, x, g1, g2]))`` with ``z ~ U(-1, 1)^z_dim``."""

    generator: Network
    z_dim: int = 8

    def __post_init__(self):
        if self.z_dim < 1:
            raise DistributionError("z_dim must be at least 1")
        expected = self.z_dim + 3 * self.generator.output_dim
        if self.generator.input_dim != expected:
            raise ShapeError(
                f"implicit generator takes {self.generator.input_dim} inputs, expected {expected}"
            )

    @classmethod
    def build(cls, dim: int, rng, z_dim: int = 8, hidden=(64,)) -> "ImplicitSampler":
        generator = Network.mlp(
            [z_dim + 3 * dim, *hidden, dim], make_rng(rng), hidden=Activation.RELU
        )
        return cls(generator, z_dim)

    @property
    def dim(self) -> int:
        return self.generator.output_dim

    def draw_z(self, rng, rows: int) -> np.ndarray:
        return make_rng(rng).uniform(-1.0, 1.0, size=(rows, self.z_dim))


def implicit_delta_graph(
    bound_gen: BoundNetwork, x, g1, g2, z: np.ndarray, tm: ThreatModel
) -> Var:
    inputs = np.concatenate([np.atleast_2d(z), generator_inputs(x, g1, g2)], axis=-1)
    raw = ops.clip(bound_gen(inputs), -TANH_CLAMP, TANH_CLAMP)
    return tm.epsilon * ops.tanh(raw)


def sample_implicit(
    sampler: ImplicitSampler, x, g1, g2, tm: ThreatModel, rng
) -> tuple[np.ndarray, np.ndarray]:
    """One perturbation per row of ``x``; returns ``(delta, z)``."""
    inputs = generator_inputs(x, g1, g2)
    if inputs.shape[-1] != 3 * sampler.dim:
        raise ShapeError(f"sampler emits dim {sampler.dim}, inputs have dim {np.shape(x)[-1]}")
    z = sampler.draw_z(rng, inputs.shape[0])
    raw = sampler.generator.predict(np.concatenate([z, inputs], axis=-1))
    delta = tm.epsilon * np.tanh(np.clip(raw, -TANH_CLAMP, TANH_CLAMP))
    if np.ndim(x) == 1:
        return delta[0], z[0]
    return delta, z


@dataclass(frozen=True)
class VariationalPosterior:
    """Diagonal Gaussian ``q(z | delta)``; the network emits ``[mean, log_std]``."""

    q_net: Network

    def __post_init__(self):
        if self.q_net.output_dim % 2:
            raise ShapeError("posterior network must emit a mean and a log-std per z entry")

    @classmethod
    def build(cls, dim: int, z_dim: int, rng, hidden=(64,)) -> "VariationalPosterior":
        return cls(Network.mlp([dim, *hidden, 2 * z_dim], make_rng(rng), hidden=Activation.RELU))

    @property
    def z_dim(self) -> int:
        return self.q_net.output_dim // 2


def posterior_graph(bound_q: BoundNetwork, delta) -> tuple[Var, Var]:
    out = bound_q(delta)
    z_dim = out.shape[-1] // 2
    mean = ops.getitem(out, (slice(None), slice(0, z_dim)))
    log_std = ops.clip(
        ops.getitem(out, (slice(None), slice(z_dim, 2 * z_dim))), LOG_STD_MIN, LOG_STD_MAX
    )
    return mean, log_std


def entropy_lower_bound_graph(bound_q: BoundNetwork, z: np.ndarray, delta) -> Var:
    """Per-row ``log q(z | delta)``; the additive constant of the bound is dropped."""
    if isinstance(delta, Var):
        delta = delta if delta.ndim == 2 else ops.reshape(delta, (1, delta.shape[0]))
    else:
        delta = np.atleast_2d(delta)
    mean, log_std = posterior_graph(bound_q, delta)
    standardized = (np.atleast_2d(z) - mean) * ops.exp(-log_std)
    return ops.sum(-0.5 * ops.square(standardized) - log_std, axis=-1) - HALF_LOG_2PI * z.shape[-1]


def entropy_lower_bound(q: VariationalPosterior, z: np.ndarray, delta: np.ndarray):
    """``log q(z | delta)`` per row (a float for a single draw)."""
    z2, delta2 = np.atleast_2d(z), np.atleast_2d(delta)
    if z2.shape[-1] != q.z_dim:
        raise ShapeError(f"posterior covers z_dim {q.z_dim}, got z of shape {np.shape(z)}")
    out = q.q_net.predict(delta2)
    mean = out[:, : q.z_dim]
    log_std = np.clip(out[:, q.z_dim :], LOG_STD_MIN, LOG_STD_MAX)
    standardized = (z2 - mean) * np.exp(-log_std)
    value = np.sum(-0.5 * standardized**2 - log_std - HALF_LOG_2PI, axis=-1)
    return float(value[0]) if np.ndim(z) == 1 else value
