import copy
import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag
from scipy import stats

from attacks.base import losses_from_logits
from attacks.gradient import loss_gradients
from eval_suite.probes import diversity_l2
from grad_core.hessian import numerical_gradient
from grad_core.nn import Layer, Network
from lab.datasets import make_synthetic
from perturb_dist.explicit import (
    TanhGaussianParams,
    amortized_explicit_params,
    neg_log_density,
    push_forward,
)
from perturb_dist.implicit import ImplicitSampler, VariationalPosterior, sample_implicit
from perturb_dist.threat import ThreatModel
from trainers.exceptions import EmptyDatasetError, SnapshotError, TrainingError
from trainers.loops import Trainer, train, train_adt_exp, train_at, train_standard
from trainers.objectives import (
    ImplicitDistribution,
    classifier_gradients,
    explicit_classifier_gradients,
    objective_j,
    trades_objective,
)
from trainers.runlog import RunLog, read_runlog
from trainers.snapshot import (
    decode_snapshot,
    encode_snapshot,
    load_network,
    read_snapshot,
    write_snapshot,
)
from trainers.specs import AdamConfig, InnerConfig, Method, TrainSpec


def logistic_net(w):
    """Class-1 logit ``w * x`` against a constant class-0 logit; CE on label 0 is softplus."""
    return Network([Layer(np.array([[0.0, w]]), np.zeros(2))])


def small_spec(method, **overrides):
    fields = {
        "epochs": 2,
        "batch_size": 16,
        "hidden": (8,),
        "generator_hidden": (8,),
        "z_dim": 2,
        "inner": InnerConfig(steps=2, samples=2),
        "threat_model": ThreatModel(epsilon=0.05),
        "seed": 11,
    }
    return TrainSpec(method=method, **{**fields, **overrides})


class ObjectiveTestCase(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.net = Network.mlp([3, 5, 2], rng)
        self.x = rng.uniform(size=(4, 3))
        self.y = np.array([0, 1, 1, 0])
        self.tm = ThreatModel(epsilon=0.1)
        self.params = TanhGaussianParams.from_sigma(
            rng.uniform(-1, 1, size=(4, 3)), rng.uniform(0.2, 1.5, size=(4, 3))
        )

    def _draws(self, seed, k):
        r = np.random.default_rng(seed).standard_normal((k,) + self.x.shape)
        return r, push_forward(self.params, self.tm, r)

    def test_without_entropy_is_the_mean_loss(self):
        r, delta = self._draws(4, 6)
        adversarial = (self.x + delta).reshape(-1, 3)
        expected = np.mean(losses_from_logits(self.net.predict(adversarial), np.tile(self.y, 6)))
        value = objective_j(self.net, self.x, self.y, self.params, self.tm, 0.0, 6, 4)
        self.assertAlmostEqual(value, expected, places=10)

    def test_entropy_weight_enters_linearly(self):
        r, _ = self._draws(4, 6)
        entropy = np.mean(neg_log_density(self.params, self.tm, r))
        base = objective_j(self.net, self.x, self.y, self.params, self.tm, 0.0, 6, 4)
        weighted = objective_j(self.net, self.x, self.y, self.params, self.tm, 0.5, 6, 4)
        self.assertAlmostEqual(weighted, base + 0.5 * entropy, places=10)

    def test_silent_implicit_generator_gives_the_natural_loss(self):
        sampler = ImplicitSampler(Network.zeros([2 + 9, 4, 3]), z_dim=2)
        posterior = VariationalPosterior.build(3, 2, np.random.default_rng(1), hidden=(4,))
        g1, g2 = loss_gradients(self.net, self.x, self.y, self.tm)
        dist = ImplicitDistribution(sampler, posterior, g1, g2)
        value = objective_j(self.net, self.x, self.y, dist, self.tm, 0.0, 3, 0)
        natural = np.mean(losses_from_logits(self.net.predict(self.x), self.y))
        self.assertAlmostEqual(value, natural, places=12)

    def test_unknown_distribution_type(self):
        with self.assertRaises(TypeError):
            objective_j(self.net, self.x, self.y, np.zeros(3), self.tm, 0.0, 1, 0)


class DistributionalGradientTestCase(SimpleTestCase):
    """The classifier gradient at the inner maximizer is the gradient of the maximum."""

    epsilon = 0.1
    lam = 0.01

    def setUp(self):
        self.tm = ThreatModel(epsilon=self.epsilon)
        nodes = 500
        # equal-weight normal quantiles stand in for the expectation over r
        self.r = stats.norm.ppf((np.arange(nodes) + 0.5) / nodes).reshape(nodes, 1, 1)
        mu, sigma = np.meshgrid(np.linspace(-3.0, 3.0, 60), np.geomspace(0.01, 2.0, 60))
        self.grid = TanhGaussianParams.from_sigma(mu.reshape(-1, 1), sigma.reshape(-1, 1))
        self.entropy = np.mean(neg_log_density(self.grid, self.tm, self.r), axis=0)

    def _objective(self, w, x):
        """``J`` at every grid point at once."""
        delta = push_forward(self.grid, self.tm, self.r)[..., 0]
        losses = np.logaddexp(0.0, w * (x + delta))
        return np.mean(losses, axis=0) + self.lam * self.entropy

    def test_gradient_matches_the_value_function(self):
        x, h = 0.5, 1e-5
        slopes = np.random.default_rng(21).uniform(-3.0, 3.0, size=20)
        checked = 0
        for w in slopes:
            values = self._objective(w, x)
            best = int(np.argmax(values))
            runner_up = np.partition(values, -2)[-2]
            upper = self._objective(w + h, x)
            lower = self._objective(w - h, x)
            unique = values[best] - runner_up > 1e-9
            if not (unique and best == np.argmax(upper) == np.argmax(lower)):
                continue
            checked += 1
            params = TanhGaussianParams(
                self.grid.mu[best : best + 1], self.grid.sigma_raw[best : best + 1]
            )
            step = explicit_classifier_gradients(
                logistic_net(w), np.array([[x]]), [0], params, self.tm, self.r
            )
            numeric = (upper[best] - lower[best]) / (2 * h)
            self.assertLess(abs(step.grads[0][0, 1] - numeric) / abs(numeric), 1e-2, msg=w)
        self.assertGreaterEqual(checked, 15)


class ClassifierGradientTestCase(SimpleTestCase):
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        net = Network.mlp([2, 3, 2], rng, hidden="tanh")
        x = rng.uniform(size=(5, 2))
        y = np.array([0, 1, 0, 1, 1])
        adversarial = x + rng.uniform(-0.1, 0.1, size=x.shape)
        step = classifier_gradients(net, x, y, adversarial)

        def objective(weight):
            params = net.parameters()
            params[0] = weight
            moved = net.with_parameters(params)
            return float(np.mean(losses_from_logits(moved.predict(adversarial), y)))

        expected = numerical_gradient(objective, net.parameters()[0])
        np.testing.assert_allclose(step.grads[0], expected, atol=1e-8)
        self.assertAlmostEqual(step.objective, objective(net.parameters()[0]), places=12)


class TradesTestCase(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.net = Network.mlp([3, 6, 3], rng)
        self.x = rng.uniform(size=(4, 3))
        self.y = np.array([0, 1, 2, 1])
        self.delta = rng.uniform(-0.3, 0.3, size=(4, 3))

    def test_zero_perturbation_is_natural_cross_entropy(self):
        value = trades_objective(self.net, self.x, self.y, np.zeros((4, 3)), beta=6.0)
        natural = np.mean(losses_from_logits(self.net.predict(self.x), self.y))
        self.assertAlmostEqual(value, natural, places=12)

    def test_grows_with_beta(self):
        low = trades_objective(self.net, self.x, self.y, self.delta, beta=1.0)
        high = trades_objective(self.net, self.x, self.y, self.delta, beta=6.0)
        self.assertLess(low, high)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(ValueError):
            trades_objective(self.net, self.x, self.y, self.delta, beta=0.0)
        params = TanhGaussianParams.initial((4, 3))
        with self.assertRaises(ValueError):
            trades_objective(self.net, self.x, self.y, params, beta=6.0)

    def test_samples_a_distribution(self):
        params = TanhGaussianParams.initial((4, 3))
        tm = ThreatModel(epsilon=0.1)
        first = trades_objective(self.net, self.x, self.y, params, 6.0, tm, rng=5)
        second = trades_objective(self.net, self.x, self.y, params, 6.0, tm, rng=5)
        self.assertEqual(first, second)


class SnapshotTestCase(SimpleTestCase):
    def test_round_trip(self):
        arrays = [np.arange(6.0).reshape(2, 3), np.array([-1.5, 2.0, 0.25]), np.array(3.0)]
        decoded = decode_snapshot(encode_snapshot(arrays))
        self.assertEqual([a.shape for a in decoded], [(2, 3), (3,), ()])
        for original, restored in zip(arrays, decoded):
            np.testing.assert_array_equal(original, restored)

    def test_layout(self):
        blob = encode_snapshot([np.array([1.0, 2.0])])
        self.assertEqual(blob[:4], b"ADTS")
        self.assertEqual(len(blob), 4 + 4 * 3 + 8 * 2)

    def test_corrupt_blobs(self):
        blob = encode_snapshot([np.ones((2, 2))])
        for broken in (b"XXXX" + blob[4:], blob[:10], blob[:-1]):
            with self.subTest(size=len(broken)), self.assertRaises(SnapshotError):
                decode_snapshot(broken)

    def test_network_from_file(self):
        net = Network.mlp([2, 4, 2], np.random.default_rng(0))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_snapshot(Path(tmp) / "nested" / "classifier.snap", net.parameters())
            self.assertEqual(len(read_snapshot(path)), 4)
            restored = load_network(path, Network.zeros([2, 4, 2]))
        x = np.random.default_rng(1).uniform(size=(3, 2))
        np.testing.assert_array_equal(restored.predict(x), net.predict(x))


class RunLogTestCase(SimpleTestCase):
    def test_mirrors_records_to_jsonl(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "runlog.jsonl"
            runlog = RunLog(path)
            runlog.append(epoch=0, loss=1.0)
            runlog.append(epoch=0, loss=0.5)
            runlog.append(epoch=1, loss=0.25)
            on_disk = read_runlog(path)
            first_line = path.read_text().splitlines()[0]
        self.assertEqual(on_disk, runlog.records)
        self.assertEqual([r["step"] for r in on_disk], [0, 1, 2])
        self.assertEqual(list(json.loads(first_line)), sorted(json.loads(first_line)))
        self.assertEqual(runlog.epoch_mean("loss", 0), 0.75)
        self.assertNotIn("wall_time", runlog.stable_records()[0])

    def test_missing_epoch(self):
        runlog = RunLog()
        runlog.append(epoch=0, loss=1.0)
        with self.assertRaises(KeyError):
            runlog.epoch_mean("loss", 3)


class TrainerTestCase(SimpleTestCase):
    def setUp(self):
        self.dataset = make_synthetic("two_moons", 32, seed=4)

    def test_every_method_is_reproducible(self):
        for method in Method:
            with self.subTest(method=method):
                spec = small_spec(method)
                first, second = train(spec, self.dataset), train(spec, self.dataset)
                self.assertEqual(first.runlog.stable_records(), second.runlog.stable_records())
                for a, b in zip(first.classifier.parameters(), second.classifier.parameters()):
                    np.testing.assert_array_equal(a, b)
                self.assertEqual(first.runlog.step, 4)

    def test_amortized_generators_track_their_steps(self):
        for method in (Method.ADT_EXP_AM, Method.ADT_IMP_AM):
            with self.subTest(method=method):
                result = train(small_spec(method), self.dataset)
                self.assertEqual(result.generator.trained_steps, 4)
                self.assertIn("generator", result.snapshots())
        result = train(small_spec(Method.ADT_IMP_AM), self.dataset)
        self.assertIn("q_net", result.snapshots())
        self.assertIsNone(train(small_spec(Method.AT_FGSM), self.dataset).generator)

    def test_generator_sample_is_frozen_for_the_classifier(self):
        """The classifier step sees the generator's draw as fixed adversarial rows."""
        trainer = Trainer(small_spec(Method.ADT_EXP_AM), self.dataset)
        x, y = self.dataset.features[:8], self.dataset.labels[:8]
        noise = copy.deepcopy(trainer.noise_rng)
        g1, g2 = loss_gradients(trainer.net, x, y, trainer.tm)
        params = amortized_explicit_params(trainer.generator, x, g1, g2)
        r = noise.standard_normal((1,) + x.shape)
        adversarial = x + push_forward(params, trainer.tm, r[0])
        expected = classifier_gradients(trainer.net, x, y, adversarial)
        before = trainer.generator.parameters()

        outcome = trainer._adt_exp_am_step(x, y)

        for got, want in zip(outcome.classifier.grads, expected.grads):
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)
        self.assertEqual(trainer.generator_steps, 1)
        moved = [np.any(a != b) for a, b in zip(before, trainer.generator.parameters())]
        self.assertTrue(any(moved))

    def test_posterior_idle_without_entropy_weight(self):
        spec = small_spec(Method.ADT_IMP_AM, inner=InnerConfig(steps=2, samples=2, lam=0.0))
        trainer = Trainer(spec, self.dataset)
        before = trainer.posterior.q_net.parameters()
        result = trainer.fit()
        for a, b in zip(before, result.posterior.q_net.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_sigma_statistics_logged_for_explicit_methods(self):
        result = train(small_spec(Method.ADT_EXP), self.dataset)
        record = result.runlog.records[-1]
        self.assertLessEqual(record["sigma_min"], record["sigma_mean"])
        self.assertLessEqual(record["sigma_mean"], record["sigma_max"])
        self.assertIsNotNone(record["entropy"])

    def test_empty_dataset(self):
        with self.assertRaises(EmptyDatasetError):
            Trainer(small_spec(Method.STANDARD), self.dataset.subset([]))

    def test_entry_points_check_the_method(self):
        with self.assertRaises(TrainingError):
            train_at(small_spec(Method.STANDARD), self.dataset)
        with self.assertRaises(TrainingError):
            train_adt_exp(small_spec(Method.AT_PGD), self.dataset)


@tag("slow")
class ConvergenceTestCase(SimpleTestCase):
    def test_standard_training_separates_blobs(self):
        dataset = make_synthetic("blobs", 200, noise=0.3, seed=0)
        result = train_standard(TrainSpec(epochs=30, seed=0), dataset)
        accuracy = np.mean(result.classifier.classify(dataset.features) == dataset.labels)
        self.assertGreaterEqual(accuracy, 0.98)
        last = result.spec.epochs - 1
        runlog = result.runlog
        self.assertLess(runlog.epoch_mean("loss", last), runlog.epoch_mean("loss", 0))

    def test_entropy_grows_with_its_weight(self):
        """Final-epoch entropy never drops as the weight rises, for every seed."""
        dataset = make_synthetic("two_moons", 256, seed=1)
        for seed in (0, 1, 2):
            entropies = []
            for lam in (0.0, 0.001, 0.01, 0.1):
                spec = TrainSpec(
                    method=Method.ADT_EXP,
                    epochs=3,
                    # enough inner steps for the scale to settle where the weight puts it
                    inner=InnerConfig(lam=lam, steps=25),
                    threat_model=ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0)),
                    seed=seed,
                )
                entropies.append(train(spec, dataset).runlog.epoch_mean("entropy", 2))
            with self.subTest(seed=seed):
                self.assertTrue(np.all(np.diff(entropies) >= 0), entropies)
                self.assertLess(entropies[0], entropies[-1])

    def test_entropy_weight_diversifies_implicit_samples(self):
        dataset = make_synthetic("two_moons", 256, seed=1)
        x = np.tile(dataset.features[:1], (100, 1))
        y = np.repeat(dataset.labels[:1], 100)
        tm = ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0))
        spreads = []
        for lam in (0.0, 0.1):
            spec = TrainSpec(
                method=Method.ADT_IMP_AM,
                epochs=30,
                inner=InnerConfig(lam=lam),
                generator=AdamConfig(lr=1e-3),
                posterior=AdamConfig(lr=1e-3),
                threat_model=tm,
                seed=0,
            )
            result = train(spec, dataset)
            g1, g2 = loss_gradients(result.classifier, x, y, tm)
            delta, z = sample_implicit(result.generator.model, x, g1, g2, tm, rng=5)
            self.assertEqual(len(np.unique(z, axis=0)), 100)
            spreads.append(diversity_l2(delta))
        self.assertGreater(spreads[1], spreads[0])
