"""Outer minimization loops for standard, adversarial and distributional training."""

import logging
from dataclasses import dataclass

import numpy as np

from attacks.base import losses_from_logits
from attacks.distributional import AmortizedGenerator, optimize_explicit
from attacks.gradient import fgsm, iterative_attack, loss_gradients
from attacks.specs import AttackKind, AttackSpec
from grad_core import ops
from grad_core.losses import per_example_loss
from grad_core.nn import Network
from grad_core.optim import OptState, adam_step, sgd_momentum_step, step_lr
from grad_core.tape import Tape
from lab.datasets import Dataset
from lib.numeric import default_dtype, make_rng, spawn_streams
from perturb_dist.explicit import (
    LOG_2,
    amortized_explicit_graph,
    explicit_generator,
    explicit_objective,
    neg_log_density,
    perturbed_rows,
)
from perturb_dist.implicit import (
    ImplicitSampler,
    VariationalPosterior,
    entropy_lower_bound_graph,
    implicit_delta_graph,
)
from trainers.exceptions import EmptyDatasetError, TrainingError
from trainers.objectives import (
    ClassifierStep,
    classifier_gradients,
    explicit_classifier_gradients,
    outer_loss_graph,
)
from trainers.runlog import RunLog
from trainers.specs import Method, OuterLoss, TrainSpec

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    spec: TrainSpec
    classifier: Network
    runlog: RunLog
    generator: AmortizedGenerator | None = None
    posterior: VariationalPosterior | None = None

    def snapshots(self) -> dict[str, list[np.ndarray]]:
        """Parameter lists keyed by the snapshot file stem they are written to."""
        out = {"classifier": self.classifier.parameters()}
        if self.generator is not None:
            model = self.generator.model
            network = model.generator if isinstance(model, ImplicitSampler) else model
            out["generator"] = network.parameters()
        if self.posterior is not None:
            out["q_net"] = self.posterior.q_net.parameters()
        return out


@dataclass(frozen=True)
class BatchOutcome:
    classifier: ClassifierStep
    inner_objective: float | None = None
    entropy: float | None = None
    sigma: np.ndarray | None = None


def _batches(rng, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class Trainer:
    """Owns every mutable parameter of one run and steps them batch by batch."""

    def __init__(self, spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
        if dataset.n == 0:
            raise EmptyDatasetError("cannot train on an empty dataset")
        self.spec = spec
        self.tm = spec.threat_model
        self.dataset = dataset
        self.runlog = runlog if runlog is not None else RunLog()
        init_rng, self.data_rng, self.noise_rng = spawn_streams(make_rng(spec.seed), 3)

        dims = [dataset.dim, *spec.hidden, dataset.num_classes]
        self.net = Network.mlp(dims, init_rng, dtype=default_dtype())
        self.opt = OptState.sgd(
            self.net.parameters(),
            lr=spec.classifier.lr,
            momentum=spec.classifier.momentum,
            weight_decay=spec.classifier.weight_decay,
        )

        self.generator = None
        self.sampler = None
        self.posterior = None
        self.generator_steps = 0
        if spec.method is Method.ADT_EXP_AM:
            self.generator = explicit_generator(
                dataset.dim, init_rng, hidden=spec.generator_hidden
            )
        elif spec.method is Method.ADT_IMP_AM:
            self.sampler = ImplicitSampler.build(
                dataset.dim, init_rng, z_dim=spec.z_dim, hidden=spec.generator_hidden
            )
            self.generator = self.sampler.generator
            self.posterior = VariationalPosterior.build(
                dataset.dim, spec.z_dim, init_rng, hidden=spec.generator_hidden
            )
            self.q_opt = OptState.adam(
                self.posterior.q_net.parameters(),
                lr=spec.posterior.lr,
                betas=spec.posterior.betas,
            )
        if self.generator is not None:
            self.gen_opt = OptState.adam(
                self.generator.parameters(), lr=spec.generator.lr, betas=spec.generator.betas
            )

        self._steps = {
            Method.STANDARD: self._standard_step,
            Method.AT_FGSM: self._at_fgsm_step,
            Method.AT_PGD: self._at_pgd_step,
            Method.ADT_EXP: self._adt_exp_step,
            Method.ADT_EXP_AM: self._adt_exp_am_step,
            Method.ADT_IMP_AM: self._adt_imp_am_step,
        }

    def _natural_logits(self, x):
        return self.net.predict(x) if self.spec.loss is OuterLoss.TRADES else None

    def _classifier_step(self, x, y, adversarial) -> ClassifierStep:
        return classifier_gradients(self.net, x, y, adversarial, self.spec.loss, self.spec.beta)

    def _standard_step(self, x, y) -> BatchOutcome:
        return BatchOutcome(self._classifier_step(x, y, x))

    def _at_fgsm_step(self, x, y) -> BatchOutcome:
        delta = fgsm(self.net, x, y, self.tm, targeted=True).delta
        return BatchOutcome(self._classifier_step(x, y, x + delta))

    def _at_pgd_step(self, x, y) -> BatchOutcome:
        attack = AttackSpec(
            name="train_pgd",
            kind=AttackKind.ITERATIVE,
            steps=self.spec.inner.steps,
            loss=self.spec.inner_loss,
        )
        delta = iterative_attack(self.net, x, y, self.tm, attack, self.noise_rng).delta
        return BatchOutcome(self._classifier_step(x, y, x + delta))

    def _adt_exp_step(self, x, y) -> BatchOutcome:
        inner = self.spec.inner
        params, trace = optimize_explicit(
            self.net,
            x,
            y,
            self.tm,
            inner.lam,
            inner.steps,
            inner.samples,
            inner.lr,
            self.noise_rng,
            inner.betas,
            loss=self.spec.inner_loss,
            natural_logits=self._natural_logits(x),
        )
        # fresh draws at the fitted distribution for the classifier step
        r = self.noise_rng.standard_normal((inner.samples,) + x.shape)
        step = explicit_classifier_gradients(
            self.net, x, y, params, self.tm, r, self.spec.loss, self.spec.beta
        )
        entropy = float(np.mean(neg_log_density(params, self.tm, r)))
        return BatchOutcome(step, trace[-1], entropy, params.sigma)

    def _descend_and_ascend(self, tape, bound_net, x, y, adversarial, inner_objective):
        outer = outer_loss_graph(bound_net, x, y, adversarial, self.spec.loss, self.spec.beta)
        classifier_grads = tape.backward(outer)
        inner_grads = tape.backward(inner_objective)
        adversarial_ce = float(np.mean(losses_from_logits(self.net.predict(adversarial.value), y)))
        step = ClassifierStep(
            outer.item(), adversarial_ce, [classifier_grads[p] for p in bound_net.params]
        )
        return step, inner_grads

    def _ascend_generator(self, bound_gen, grads):
        params, self.gen_opt = adam_step(
            self.generator.parameters(),
            [grads[p] for p in bound_gen.params],
            self.gen_opt,
            maximize=True,
        )
        self.generator = self.generator.with_parameters(params)
        self.generator_steps += 1

    def _adt_exp_am_step(self, x, y) -> BatchOutcome:
        g1, g2 = loss_gradients(self.net, x, y, self.tm)
        tape = Tape()
        bound_net = self.net.bind(tape)
        bound_gen = self.generator.bind(tape)
        mu, sigma = amortized_explicit_graph(bound_gen, x, g1, g2)
        # one draw per example
        r = self.noise_rng.standard_normal((1,) + x.shape)
        terms = explicit_objective(
            bound_net,
            x,
            y,
            mu,
            sigma,
            r,
            self.tm,
            self.spec.inner.lam,
            self.spec.inner_loss,
            self._natural_logits(x),
        )
        inner_objective = ops.mean(terms.per_sample)
        adversarial = perturbed_rows(x, terms.delta, self.tm)
        step, grads = self._descend_and_ascend(tape, bound_net, x, y, adversarial, inner_objective)
        self._ascend_generator(bound_gen, grads)
        entropy = float(np.mean(terms.neg_log_density.value))
        return BatchOutcome(step, inner_objective.item(), entropy, sigma.value)

    def _adt_imp_am_step(self, x, y) -> BatchOutcome:
        g1, g2 = loss_gradients(self.net, x, y, self.tm)
        tape = Tape()
        bound_net = self.net.bind(tape)
        bound_gen = self.generator.bind(tape)
        bound_q = self.posterior.q_net.bind(tape)
        z = self.sampler.draw_z(self.noise_rng, x.shape[0])
        delta = implicit_delta_graph(bound_gen, x, g1, g2, z, self.tm)
        adversarial = perturbed_rows(x, delta, self.tm)
        losses = per_example_loss(
            self.spec.inner_loss, bound_net(adversarial), y, self._natural_logits(x)
        )
        entropy_bound = entropy_lower_bound_graph(bound_q, z, delta)
        inner_objective = ops.mean(losses) + self.spec.inner.lam * ops.mean(entropy_bound)
        step, grads = self._descend_and_ascend(tape, bound_net, x, y, adversarial, inner_objective)

        q_params, self.q_opt = adam_step(
            self.posterior.q_net.parameters(),
            [grads[p] for p in bound_q.params],
            self.q_opt,
            maximize=True,
        )
        self.posterior = VariationalPosterior(self.posterior.q_net.with_parameters(q_params))
        self._ascend_generator(bound_gen, grads)
        self.sampler = ImplicitSampler(self.generator, self.spec.z_dim)
        # the bound drops the entropy of the uniform code z
        entropy = float(np.mean(entropy_bound.value)) + self.spec.z_dim * LOG_2
        return BatchOutcome(step, inner_objective.item(), entropy)

    def _log(self, epoch: int, batch: int, lr: float, outcome: BatchOutcome):
        step = outcome.classifier
        fields = {
            "epoch": epoch,
            "batch": batch,
            "lr": lr,
            "objective": (
                step.objective if outcome.inner_objective is None else outcome.inner_objective
            ),
            "outer": step.objective,
            "loss": step.adversarial_loss,
            "entropy": outcome.entropy,
        }
        if outcome.sigma is not None:
            fields.update(
                sigma_min=float(np.min(outcome.sigma)),
                sigma_mean=float(np.mean(outcome.sigma)),
                sigma_max=float(np.max(outcome.sigma)),
            )
        record = self.runlog.append(**fields)
        logger.debug(
            "epoch=%d batch=%d objective=%.6f loss=%.6f",
            epoch,
            batch,
            record["objective"],
            record["loss"],
        )

    def fit(self) -> TrainResult:
        spec = self.spec
        step_fn = self._steps[spec.method]
        features, labels = self.dataset.features, self.dataset.labels
        for epoch in range(spec.epochs):
            lr = step_lr(
                spec.classifier.lr, epoch, spec.classifier.milestones, spec.classifier.gamma
            )
            self.opt = self.opt.with_lr(lr)
            batches = _batches(self.data_rng, self.dataset.n, spec.batch_size)
            for batch, index in enumerate(batches):
                x = features[index].astype(self.net.layers[0].weight.dtype)
                outcome = step_fn(x, labels[index])
                params, self.opt = sgd_momentum_step(
                    self.net.parameters(), outcome.classifier.grads, self.opt
                )
                self.net = self.net.with_parameters(params)
                self._log(epoch, batch, lr, outcome)
            logger.info(
                "method=%s epoch=%d loss=%.4f objective=%.4f",
                spec.method,
                epoch,
                self.runlog.epoch_mean("loss", epoch),
                self.runlog.epoch_mean("objective", epoch),
            )
        generator = None
        if self.generator is not None:
            model = self.sampler if self.sampler is not None else self.generator
            generator = AmortizedGenerator(model, trained_steps=self.generator_steps)
        return TrainResult(spec, self.net, self.runlog, generator, self.posterior)


def train(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None) -> TrainResult:
    """Train a classifier (and any generator the method needs) from ``spec.seed``."""
    return Trainer(spec, dataset, runlog).fit()


def _train_expecting(methods, spec, dataset, runlog):
    if spec.method not in methods:
        names = ", ".join(sorted(methods))
        raise TrainingError(f"method {spec.method} cannot run here; expected one of {names}")
    return train(spec, dataset, runlog)


def train_standard(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
    return _train_expecting({Method.STANDARD}, spec, dataset, runlog)


def train_at(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
    return _train_expecting({Method.AT_FGSM, Method.AT_PGD}, spec, dataset, runlog)


def train_adt_exp(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
    return _train_expecting({Method.ADT_EXP}, spec, dataset, runlog)


def train_adt_exp_am(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
    return _train_expecting({Method.ADT_EXP_AM}, spec, dataset, runlog)


def train_adt_imp_am(spec: TrainSpec, dataset: Dataset, runlog: RunLog | None = None):
    return _train_expecting({Method.ADT_IMP_AM}, spec, dataset, runlog)
