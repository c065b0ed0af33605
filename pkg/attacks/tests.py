from unittest import mock

import numpy as np
from django.test import SimpleTestCase, tag

from attacks.base import QueryModel, losses_from_logits, misclassified
from attacks.dispatch import run_attack
from attacks.distributional import (
    AmortizedGenerator,
    dist_attack_amortized,
    dist_attack_exp,
    optimize_explicit,
)
from attacks.exceptions import AttackError, ForeignClassMissing, UntrainedGeneratorError
from attacks.feature import cosine_and_gradient, feature_attack
from attacks.gradient import fgsm, iterative_attack
from attacks.specs import AttackKind, AttackSpec, preset
from attacks.spsa import spsa_attack, spsa_gradient
from grad_core import ops
from grad_core.nn import Activation, Layer, Network, input_gradient
from grad_core.losses import softmax_cross_entropy
from grad_core.tape import Tape
from lab.datasets import make_synthetic
from perturb_dist.explicit import SIGMA_FLOOR, explicit_generator
from perturb_dist.implicit import ImplicitSampler
from perturb_dist.threat import ThreatModel
from trainers.loops import train_standard
from trainers.specs import TrainSpec


def margin_net(*w):
    """Two logits whose margin ``z1 - z0`` is ``w . x``; class 1 wins when it is positive."""
    return Network([Layer(np.array([[0.0, wj] for wj in w]), np.zeros(2))])


class FgsmTestCase(SimpleTestCase):
    def test_sign_rule(self):
        result = fgsm(
            margin_net(0.3, -0.5), np.array([0.2, 0.4]), 0, ThreatModel(epsilon=0.1), "cw_margin"
        )
        np.testing.assert_allclose(result.delta, [0.1, -0.1])

    def test_zero_gradient_gives_zero_step(self):
        result = fgsm(margin_net(0.0, 0.0), np.array([0.2, 0.4]), 0, ThreatModel(epsilon=0.1))
        np.testing.assert_array_equal(result.delta, [0.0, 0.0])

    def test_targeted_step_favours_least_likely_class(self):
        rng = np.random.default_rng(0)
        net = Network.mlp([3, 3], rng)
        x = rng.uniform(size=(6, 3))
        target = np.argmin(net.predict(x), axis=-1)
        y = np.argmax(net.predict(x), axis=-1)
        result = fgsm(net, x, y, ThreatModel(epsilon=0.05), targeted=True)
        before = losses_from_logits(net.predict(x), target)
        after = losses_from_logits(net.predict(x + result.delta), target)
        self.assertTrue(np.all(after < before))

    def test_pixel_box_respected(self):
        tm = ThreatModel(epsilon=0.3, pixel_box=(0.0, 1.0))
        x = np.array([[0.95, 0.05], [0.5, 0.5]])
        result = fgsm(margin_net(1.0, -1.0), x, [0, 0], tm, "cw_margin")
        self.assertTrue(tm.contains(x, result.delta))


class IterativeAttackTestCase(SimpleTestCase):
    def _spec(self, **kwargs):
        return AttackSpec(kind=AttackKind.ITERATIVE, **kwargs)

    def test_constant_gradient_saturates_the_box(self):
        spec = self._spec(steps=5, step_size=0.1, loss="cw_margin")
        result = iterative_attack(
            margin_net(1.0, -2.0), np.array([0.5, 0.5]), 0, ThreatModel(epsilon=0.1), spec, 0
        )
        np.testing.assert_allclose(result.delta, [0.1, -0.1])

    def test_momentum_matches_pgd_on_collinear_gradients(self):
        net, x = margin_net(0.7, -0.2, 1.1), np.array([0.1, 0.2, 0.3])
        tm = ThreatModel(epsilon=0.2)
        common = {"steps": 6, "loss": "cw_margin", "random_start": False}
        pgd = iterative_attack(net, x, 0, tm, self._spec(**common), 0)
        mim = iterative_attack(net, x, 0, tm, self._spec(momentum_decay=1.0, **common), 0)
        np.testing.assert_array_equal(pgd.delta, mim.delta)
        self.assertEqual(pgd.loss_trace, mim.loss_trace)

    def test_one_margin_step(self):
        """Logits (5, 1) with true class 0 have margin -4; one step raises it."""
        net = Network([Layer(np.eye(2), np.zeros(2))])
        x = np.array([5.0, 1.0])
        self.assertEqual(losses_from_logits(net.predict(x), 0, "cw_margin")[0], -4.0)
        spec = self._spec(steps=1, step_size=0.5, loss="cw_margin", random_start=False)
        result = iterative_attack(net, x, 0, ThreatModel(epsilon=0.5), spec, 0)
        self.assertEqual(result.loss_trace, [-4.0, -3.0])

    def test_loss_trace_never_decreases_on_convex_loss(self):
        """Cross-entropy of a linear model is convex in the input, so signed ascent is monotone."""
        rng = np.random.default_rng(1)
        net = Network.mlp([3, 4], rng)
        x = rng.uniform(size=(8, 3))
        spec = self._spec(steps=15, random_start=False)
        tm = ThreatModel(epsilon=0.2, pixel_box=(0.0, 1.0))
        trace = iterative_attack(net, x, rng.integers(0, 4, size=8), tm, spec, 0).loss_trace
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(trace, trace[1:])))

    def test_support_over_random_specs(self):
        rng = np.random.default_rng(2)
        net = Network.mlp([4, 8, 3], rng)
        for _ in range(20):
            tm = ThreatModel(
                epsilon=rng.uniform(0.01, 0.5),
                pixel_box=(0.0, 1.0) if rng.random() < 0.5 else None,
            )
            spec = self._spec(
                steps=int(rng.integers(1, 6)),
                restarts=int(rng.integers(1, 3)),
                momentum_decay=float(rng.choice([0.0, 1.0])),
                loss=str(rng.choice(["cross_entropy", "cw_margin", "kl_to_natural"])),
            )
            x = rng.uniform(size=(5, 4))
            result = iterative_attack(net, x, rng.integers(0, 3, size=5), tm, spec, rng)
            self.assertTrue(tm.contains(x, result.delta))

    def _setup_model(self):
        rng = np.random.default_rng(3)
        net = Network.mlp([2, 16, 16, 2], rng)
        x = rng.uniform(size=(40, 2))
        return net, x, net.classify(x)

    def test_more_steps_never_report_higher_accuracy(self):
        net, x, y = self._setup_model()
        tm = ThreatModel(epsilon=0.05)
        short = iterative_attack(net, x, y, tm, preset("pgd20"), 7)
        long = iterative_attack(net, x, y, tm, preset("pgd100"), 7)
        self.assertTrue(np.all(long.success[short.success]))
        self.assertLessEqual(long.accuracy, short.accuracy)

    def test_more_restarts_never_report_higher_accuracy(self):
        net, x, y = self._setup_model()
        tm = ThreatModel(epsilon=0.05)
        two = iterative_attack(net, x, y, tm, preset("pgd20", restarts=2), 8)
        three = iterative_attack(net, x, y, tm, preset("pgd20", restarts=3), 8)
        self.assertTrue(np.all(three.success[two.success]))

    def test_rejects_other_kinds(self):
        with self.assertRaises(AttackError):
            iterative_attack(margin_net(1.0), np.zeros(1), 0, ThreatModel(), preset("fgsm"))


class SpsaTestCase(SimpleTestCase):
    def test_estimate_is_unbiased_for_linear_losses(self):
        w = np.array([0.7, -1.3])
        model = QueryModel(margin_net(*w))
        x = np.tile([0.3, 0.6], (10_000, 1))
        estimates = spsa_gradient(
            model, x, np.zeros(10_000, dtype=int), "cw_margin", 1, 0.001, np.random.default_rng(4)
        )
        standard_error = estimates.std(axis=0) / np.sqrt(estimates.shape[0])
        self.assertTrue(np.all(np.abs(estimates.mean(axis=0) - w) < 4 * standard_error))

    def test_estimate_aligns_with_true_gradient(self):
        rng = np.random.default_rng(5)
        net = Network.mlp([4, 8, 3], rng, hidden=Activation.TANH)
        x = rng.uniform(size=(100, 4))
        y = rng.integers(0, 3, size=100)
        estimate = spsa_gradient(QueryModel(net), x, y, "cross_entropy", 256, 0.001, rng)
        _, exact = input_gradient(net, x, lambda z: softmax_cross_entropy(z, y, reduction="none"))
        cosine = np.sum(estimate * exact, axis=-1) / (
            np.linalg.norm(estimate, axis=-1) * np.linalg.norm(exact, axis=-1)
        )
        self.assertGreater(cosine.mean(), 0.5)

    def test_already_misclassified_input_stops_immediately(self):
        net = margin_net(1.0, 1.0)
        x = np.array([[0.5, 0.5]])
        result = spsa_attack(net, x, [0], ThreatModel(epsilon=0.1), preset("spsa"), 0)
        np.testing.assert_array_equal(result.delta, np.zeros((1, 2)))
        self.assertTrue(result.success[0])
        self.assertEqual(result.loss_trace, [])

    def test_breaks_points_near_the_boundary_without_gradients(self):
        net = margin_net(1.0, -1.0)
        x = np.column_stack([np.full(5, 0.5), 0.5 + np.linspace(0.01, 0.09, 5)])
        spec = preset("spsa", spsa={"batch": 16, "iters": 30})
        with mock.patch.object(Tape, "backward", side_effect=AssertionError("gradient used")):
            result = spsa_attack(net, x, np.zeros(5, dtype=int), ThreatModel(epsilon=0.1), spec, 6)
        self.assertTrue(np.all(result.success))
        self.assertGreater(result.queries, 0)


class FeatureAttackTestCase(SimpleTestCase):
    def test_cosine_similarity_primitive(self):
        tape = Tape()
        v = tape.leaf([[1.0, -2.0, 0.5]])
        self.assertAlmostEqual(ops.cosine_similarity(v, v).item(), 1.0, places=12)
        self.assertAlmostEqual(ops.cosine_similarity(v, -v).item(), -1.0, places=12)

    def test_descent_moves_away_from_self_target(self):
        rng = np.random.default_rng(6)
        net = Network.mlp([3, 8, 2], rng, hidden=Activation.TANH)
        x = rng.uniform(size=(1, 3))
        target = net.features(x)
        start, _ = cosine_and_gradient(net, x, target)
        self.assertAlmostEqual(start[0], 1.0, places=12)
        nudged = x + 0.01 * rng.normal(size=x.shape)
        before, grad = cosine_and_gradient(net, nudged, target)
        after, _ = cosine_and_gradient(net, nudged - 1e-3 * np.sign(grad), target)
        self.assertLess(after[0], before[0])

    def test_pool_without_foreign_class(self):
        net = Network.mlp([2, 4, 2], np.random.default_rng(0))
        with self.assertRaises(ForeignClassMissing):
            feature_attack(
                net,
                np.zeros((1, 2)),
                [1],
                np.ones((3, 2)),
                np.ones(3, dtype=int),
                ThreatModel(epsilon=0.1),
                preset("feature"),
            )

    def test_more_targets_never_lower_success(self):
        rng = np.random.default_rng(7)
        net = Network.mlp([2, 16, 2], rng)
        pool_x = rng.uniform(size=(30, 2))
        pool_y = np.arange(30) % 2
        x = rng.uniform(size=(20, 2))
        y = net.classify(x)
        tm = ThreatModel(epsilon=0.1)
        few = feature_attack(
            net, x, y, pool_x, pool_y, tm, preset("feature", feature={"num_targets": 2}), 9
        )
        many = feature_attack(
            net, x, y, pool_x, pool_y, tm, preset("feature", feature={"num_targets": 6}), 9
        )
        self.assertTrue(np.all(many.success[few.success]))
        self.assertTrue(tm.contains(x, many.delta))


class DistributionalAttackTestCase(SimpleTestCase):
    def _fit(self, lam, slope=1.0, k=2000):
        params, _ = optimize_explicit(
            margin_net(slope),
            np.array([0.5]),
            0,
            ThreatModel(epsilon=0.1),
            lam,
            steps=80,
            k=k,
            lr=0.3,
            rng=np.random.default_rng(10),
            loss="cw_margin",
        )
        return params

    def test_without_entropy_the_distribution_collapses(self):
        """A monotone loss pulls the mean to the corner and the scale to its floor.

        Near the floor the scale gradient is tiny, so the margin is steep enough to
        clear the Adam epsilon and the draws are plentiful enough to resolve its sign.
        """
        collapsed = self._fit(0.0, slope=1e4, k=400_000)
        self.assertEqual(collapsed.mu[0], 4.0)
        self.assertGreaterEqual(collapsed.sigma[0], SIGMA_FLOOR * (1 - 1e-9))
        self.assertLess(collapsed.sigma[0], 2 * SIGMA_FLOOR)
        spread = self._fit(0.01)
        self.assertGreater(spread.sigma[0], 10 * collapsed.sigma[0])
        self.assertGreater(spread.sigma[0], 10 * SIGMA_FLOOR)

    def test_exp_attack_returns_a_supported_sample(self):
        rng = np.random.default_rng(11)
        net = Network.mlp([2, 8, 2], rng)
        x = rng.uniform(size=2)
        tm = ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0))
        params, result = dist_attack_exp(net, x, net.classify(x)[0], tm, steps=5, k=4, rng=rng)
        self.assertEqual(params.mu.shape, (2,))
        self.assertEqual(len(result.loss_trace), 5)
        self.assertTrue(tm.contains(x, result.delta))

    def test_zero_generator_is_a_null_perturbation(self):
        rng = np.random.default_rng(12)
        net = Network.mlp([2, 8, 2], rng)
        x = rng.uniform(size=(10, 2))
        y = rng.integers(0, 2, size=10)
        sampler = ImplicitSampler(Network.zeros([4 + 6, 8, 2]), z_dim=4)
        result = dist_attack_amortized(
            AmortizedGenerator(sampler, trained_steps=1), net, x, y, ThreatModel(epsilon=0.1), rng
        )
        np.testing.assert_array_equal(result.delta, np.zeros_like(x))
        np.testing.assert_array_equal(result.success, misclassified(net, x, y))

    def test_explicit_generator_respects_support(self):
        rng = np.random.default_rng(13)
        net = Network.mlp([2, 8, 2], rng)
        x = rng.uniform(size=(50, 2))
        tm = ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0))
        generator = AmortizedGenerator(explicit_generator(2, rng), trained_steps=3)
        result = dist_attack_amortized(generator, net, x, net.classify(x), tm, rng)
        self.assertTrue(tm.contains(x, result.delta))

    def test_untrained_generator_is_refused(self):
        net = Network.mlp([2, 8, 2], np.random.default_rng(0))
        with self.assertRaises(UntrainedGeneratorError):
            dist_attack_amortized(
                AmortizedGenerator(explicit_generator(2, 0)), net, np.zeros(2), 0, ThreatModel()
            )


class DispatchTestCase(SimpleTestCase):
    def test_identity_attack_reports_natural_errors(self):
        rng = np.random.default_rng(14)
        net = Network.mlp([2, 4, 2], rng)
        x, y = rng.uniform(size=(12, 2)), rng.integers(0, 2, size=12)
        result = run_attack(preset("natural"), net, x, y, ThreatModel())
        np.testing.assert_array_equal(result.delta, np.zeros_like(x))
        np.testing.assert_array_equal(result.success, net.classify(x) != y)

    def test_presets(self):
        self.assertEqual(preset("pgd100").steps, 100)
        self.assertEqual(preset("mim20").momentum_decay, 1.0)
        self.assertEqual(preset("cw30").loss, "cw_margin")
        self.assertEqual(preset("exp").explicit.samples, 10)
        self.assertEqual(preset("feature_full").feature.num_targets, 200)
        self.assertAlmostEqual(preset("pgd20").alpha(0.1), 0.025)
        with self.assertRaises(KeyError):
            preset("pgd7000")

    def test_feature_attack_needs_a_pool(self):
        net = Network.mlp([2, 4, 2], np.random.default_rng(0))
        with self.assertRaises(AttackError):
            run_attack(preset("feature"), net, np.zeros((1, 2)), [0], ThreatModel())

    def test_epsilon_override(self):
        spec = preset("fgsm", epsilon=0.05)
        result = run_attack(spec, margin_net(1.0, -1.0), np.array([0.5, 0.5]), 0, ThreatModel())
        np.testing.assert_allclose(np.abs(result.delta), [0.05, 0.05])


@tag("slow")
class TrainedModelAttackTestCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        train_set, cls.test = make_synthetic("two_moons", 1000, noise=0.1, seed=0).split(0.2, 0)
        cls.tm = ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0))
        cls.net = train_standard(TrainSpec(threat_model=cls.tm), train_set).classifier

    def test_attack_strength_ordering_on_a_trained_model(self):
        x, y = self.test.features, self.test.labels
        one_step = run_attack(preset("fgsm"), self.net, x, y, self.tm, rng=4)
        pgd20 = run_attack(preset("pgd20"), self.net, x, y, self.tm, rng=4)
        pgd100 = run_attack(preset("pgd100"), self.net, x, y, self.tm, rng=4)
        # the longer run repeats the shorter one's iterates before continuing
        self.assertTrue(np.all(pgd100.success[pgd20.success]))
        self.assertLessEqual(pgd100.accuracy, pgd20.accuracy)
        self.assertLessEqual(pgd20.accuracy, one_step.accuracy)

    def test_exp_attack_settles_within_ten_steps(self):
        logits = self.net.predict(self.test.features)
        correct = np.flatnonzero(np.argmax(logits, axis=-1) == self.test.labels)
        margins = np.abs(logits[correct, 1] - logits[correct, 0])
        chosen = correct[np.argsort(margins)[:20]]
        _, result = dist_attack_exp(
            self.net,
            self.test.features[chosen],
            self.test.labels[chosen],
            self.tm,
            steps=20,
            k=100,
            rng=6,
        )
        trace = np.asarray(result.loss_trace)
        rise = trace.max() - trace[0]
        self.assertGreater(rise, 0.0)
        self.assertLess(np.ptp(trace[10:]), 0.05 * rise)
