import tempfile
import warnings
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag
from scipy.spatial.distance import pdist

from attacks.base import losses_from_logits
from attacks.dispatch import run_attack
from attacks.specs import preset
from eval_suite.exceptions import EvaluationError, NonConvergenceWarning
from eval_suite.probes import (
    attack_samples,
    diversity_l2,
    dominant_hessian_eigenvalue,
    loss_surface_grid,
    pca_project,
)
from eval_suite.report import (
    CSV_COLUMNS,
    ROBUST_ROW,
    EvalReport,
    aggregate_robust_accuracy,
    read_report_csv,
    robust_accuracy,
    transfer_eval,
    write_report_csv,
)
from grad_core.hessian import hvp
from grad_core.losses import per_example_loss
from grad_core.nn import Activation, Layer, Network
from lab.datasets import make_synthetic
from perturb_dist.threat import ThreatModel
from trainers.loops import train
from trainers.specs import Method, TrainSpec


def margin_net(*w):
    return Network([Layer(np.array([[0.0, wj] for wj in w]), np.zeros(2))])


class AggregationTestCase(SimpleTestCase):
    def test_per_example_minimum(self):
        masks = [np.array([1, 1, 0, 1]), np.array([1, 0, 0, 1]), np.array([1, 1, 1, 1])]
        accuracy, worst = aggregate_robust_accuracy(masks)
        self.assertEqual(accuracy, 0.5)
        np.testing.assert_array_equal(worst, [True, False, False, True])

    def test_never_exceeds_any_single_attack(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            attacks = int(rng.integers(1, 6))
            masks = [rng.random(25) < rng.uniform(0.2, 0.9) for _ in range(attacks)]
            accuracy, _ = aggregate_robust_accuracy(masks)
            self.assertLessEqual(accuracy, min(np.mean(m) for m in masks))
            extended, _ = aggregate_robust_accuracy(masks + [rng.random(25) < 0.5])
            self.assertLessEqual(extended, accuracy)

    def test_empty_suite_raises(self):
        with self.assertRaises(EvaluationError):
            aggregate_robust_accuracy([])

    def test_report_rows_end_with_robust(self):
        report = EvalReport("m", 2, 1.0, {"fgsm": np.array([True, False])})
        rows = report.rows()
        self.assertEqual([row["attack"] for row in rows], ["fgsm", ROBUST_ROW])
        self.assertEqual(rows[-1]["accuracy"], 0.5)


class RobustAccuracyTestCase(SimpleTestCase):
    def setUp(self):
        self.dataset = make_synthetic("two_moons", 40, seed=3)
        self.net = Network.mlp([2, 8, 2], np.random.default_rng(1))
        self.tm = ThreatModel(epsilon=0.05)

    def test_identity_suite_equals_natural_accuracy(self):
        report = robust_accuracy(self.net, self.dataset, [preset("natural")], self.tm, workers=1)
        natural = np.mean(self.net.classify(self.dataset.features) == self.dataset.labels)
        self.assertEqual(report.robust_accuracy, natural)
        self.assertEqual(report.natural_accuracy, natural)

    def test_csv_is_reproducible(self):
        suite = [preset("natural"), preset("fgsm"), preset("pgd20")]
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for run in range(2):
                report = robust_accuracy(
                    self.net, self.dataset, suite, self.tm, rng=7, workers=2, model="clf"
                )
                paths.append(write_report_csv([report], Path(tmp) / f"report{run}.csv"))
            self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())
            rows = read_report_csv(paths[0])
        self.assertEqual(tuple(rows[0]), CSV_COLUMNS)
        self.assertEqual([row["attack"] for row in rows], ["natural", "fgsm", "pgd20", "robust"])
        self.assertTrue(all(row["n"] == 40 for row in rows))
        self.assertLessEqual(rows[-1]["accuracy"], min(row["accuracy"] for row in rows[:-1]))

    def test_empty_suite_and_dataset_raise(self):
        with self.assertRaises(EvaluationError):
            robust_accuracy(self.net, self.dataset, [], self.tm, workers=1)
        with self.assertRaises(EvaluationError):
            robust_accuracy(self.net, self.dataset.subset([]), [preset("fgsm")], self.tm)


class TransferTestCase(SimpleTestCase):
    def setUp(self):
        self.dataset = make_synthetic("blobs", 30, noise=0.3, seed=0)
        self.net = Network.mlp([2, 8, 2], np.random.default_rng(2))
        self.tm = ThreatModel(epsilon=0.1)

    def test_self_transfer_matches_white_box(self):
        x, y = self.dataset.features, self.dataset.labels
        white_box = run_attack(preset("fgsm"), self.net, x, y, self.tm)
        accuracy = transfer_eval(self.net, self.net, self.dataset, preset("fgsm"), self.tm)
        self.assertAlmostEqual(accuracy, white_box.accuracy)

    def test_constant_target_scores_the_base_rate(self):
        constant = Network([Layer(np.zeros((2, 2)), np.array([0.0, 1.0]))])
        accuracy = transfer_eval(self.net, constant, self.dataset, preset("pgd20"), self.tm, 0)
        self.assertAlmostEqual(accuracy, np.mean(self.dataset.labels == 1))

    def test_mismatched_inputs_raise(self):
        with self.assertRaises(EvaluationError):
            transfer_eval(self.net, margin_net(1.0), self.dataset, preset("fgsm"), self.tm)


class DiversityTestCase(SimpleTestCase):
    def test_two_points(self):
        self.assertEqual(diversity_l2([[0.0, 0.0], [2.0, 0.0]]), 2.0)

    def test_identical_points(self):
        self.assertEqual(diversity_l2(np.ones((5, 3))), 0.0)

    def test_needs_two_samples(self):
        with self.assertRaises(EvaluationError):
            diversity_l2([[1.0, 2.0]])


class LossSurfaceTestCase(SimpleTestCase):
    def test_center_is_the_natural_loss(self):
        net = Network.mlp([3, 6, 2], np.random.default_rng(0), hidden=Activation.TANH)
        x = np.array([0.2, 0.5, 0.7])
        surface = loss_surface_grid(net, x, 1, ThreatModel(epsilon=0.1), resolution=11)
        natural = losses_from_logits(net.predict(x[None]), [1])[0]
        self.assertEqual(surface.values.shape, (11, 11))
        self.assertEqual(surface.offsets[5], 0.0)
        self.assertAlmostEqual(surface.values[5, 5], natural, places=12)
        self.assertAlmostEqual(surface.offsets[0], -0.1)
        self.assertAlmostEqual(abs(surface.gradient_direction @ surface.random_direction), 0.0)

    def test_linear_margin_is_a_plane(self):
        """Along the gradient the margin grows at ``|w|``; across it, not at all."""
        w = np.array([0.6, -0.8, 0.0])
        net = margin_net(*w)
        surface = loss_surface_grid(
            net, np.full(3, 0.5), 0, ThreatModel(epsilon=0.2), resolution=9, loss="cw_margin"
        )
        a, b = np.meshgrid(surface.offsets, surface.offsets, indexing="ij")
        design = np.column_stack([np.ones(a.size), a.ravel(), b.ravel()])
        coef, *_ = np.linalg.lstsq(design, surface.values.ravel(), rcond=None)
        residual = surface.values.ravel() - design @ coef
        self.assertLess(np.max(np.abs(residual)), 1e-10)
        self.assertAlmostEqual(coef[1], np.linalg.norm(w), places=10)
        self.assertAlmostEqual(coef[2], 0.0, places=10)

    def test_vanishing_gradient_warns(self):
        with self.assertWarns(NonConvergenceWarning):
            surface = loss_surface_grid(
                margin_net(0.0, 0.0), np.array([0.3, 0.3]), 0, ThreatModel(), loss="cw_margin"
            )
        self.assertTrue(surface.degenerate)

    def test_tiny_resolution_rejected(self):
        with self.assertRaises(EvaluationError):
            loss_surface_grid(margin_net(1.0), np.array([0.0]), 0, ThreatModel(), resolution=2)


class HessianTestCase(SimpleTestCase):
    def test_rank_one_logistic_curvature(self):
        """softplus(w . x) at w . x = 0 curves by ``|w|^2 / 4`` along ``w``."""
        net = margin_net(2.0, 0.0)
        value = dominant_hessian_eigenvalue(net, np.array([0.0, 0.7]), 0)
        self.assertAlmostEqual(value, 1.0, places=6)

    def test_linear_margin_has_no_curvature(self):
        value = dominant_hessian_eigenvalue(
            margin_net(1.0, -1.0), np.array([0.2, 0.4]), 0, loss="cw_margin"
        )
        self.assertEqual(value, 0.0)

    def test_matches_dense_eigendecomposition(self):
        rng = np.random.default_rng(5)
        net = Network.mlp([4, 3], rng)
        x = rng.uniform(size=4)

        def loss_fn(logits):
            return per_example_loss("cross_entropy", logits, np.array([2]))

        dense = np.column_stack([hvp(net, loss_fn, x, e) for e in np.eye(4)])
        expected = np.max(np.abs(np.linalg.eigvalsh(0.5 * (dense + dense.T))))
        value = dominant_hessian_eigenvalue(net, x, 2, iters=1000, rng=3)
        self.assertLess(abs(value - expected) / expected, 1e-3)

    def test_scalar_hessian_settles_after_one_product(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            value = dominant_hessian_eigenvalue(margin_net(2.0), np.array([0.0]), 0, iters=1)
        self.assertAlmostEqual(value, 1.0, places=10)
        self.assertFalse([w for w in caught if issubclass(w.category, NonConvergenceWarning)])

    def test_needs_an_iteration(self):
        with self.assertRaises(EvaluationError):
            dominant_hessian_eigenvalue(margin_net(1.0), np.array([0.0]), 0, iters=0)


class PcaTestCase(SimpleTestCase):
    def test_collinear_cloud(self):
        direction = np.array([1.0, 1.0]) / np.sqrt(2.0)
        cloud = np.outer(np.arange(5.0), direction)
        projection = pca_project(cloud)
        self.assertAlmostEqual(abs(projection.components[0] @ direction), 1.0, places=8)
        self.assertAlmostEqual(projection.explained_variance[1], 0.0, places=10)
        np.testing.assert_allclose(projection.coordinates[:, 1], 0.0, atol=1e-8)

    def test_rotated_axes(self):
        u = np.array([np.cos(0.4), np.sin(0.4)])
        v = np.array([-u[1], u[0]])
        cloud = np.stack([3 * u, -3 * u, v, -v])
        projection = pca_project(cloud, rng=1)
        np.testing.assert_allclose(projection.explained_variance, [6.0, 2.0 / 3.0], rtol=1e-8)
        self.assertAlmostEqual(abs(projection.components[0] @ u), 1.0, places=8)
        self.assertAlmostEqual(abs(projection.components[1] @ v), 1.0, places=8)

    def test_projection_never_stretches_distances(self):
        cloud = np.random.default_rng(0).normal(size=(30, 5))
        projection = pca_project(cloud)
        self.assertTrue(np.all(pdist(projection.coordinates) <= pdist(cloud) + 1e-9))
        self.assertGreaterEqual(*projection.explained_variance)

    def test_degenerate_inputs_raise(self):
        for cloud in (np.zeros((2, 3)), np.zeros((5, 1)), np.ones((4, 3))):
            with self.subTest(shape=cloud.shape), self.assertRaises(EvaluationError):
                pca_project(cloud)


class AttackSamplesTestCase(SimpleTestCase):
    def test_shapes_and_support(self):
        net = Network.mlp([2, 8, 2], np.random.default_rng(0))
        tm = ThreatModel(epsilon=0.1)
        x = np.array([0.5, 0.5])
        distribution, endpoints = attack_samples(net, x, 0, tm, count=5, steps=3, k=4)
        self.assertEqual(distribution.shape, (5, 2))
        self.assertEqual(endpoints.shape, (5, 2))
        self.assertTrue(tm.contains(x, distribution))
        self.assertTrue(tm.contains(x, endpoints))


@tag("slow")
class MethodOrderingTestCase(SimpleTestCase):
    """Two moons at eps 0.1 with a 2-16-16-2 classifier per method and seed."""

    seeds = (0, 1, 2)
    distributional = (Method.ADT_EXP, Method.ADT_EXP_AM, Method.ADT_IMP_AM)
    methods = (Method.STANDARD, Method.AT_PGD, *distributional)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tm = ThreatModel(epsilon=0.1, pixel_box=(0.0, 1.0))
        cls.tests, cls.nets = {}, {}
        for seed in cls.seeds:
            dataset = make_synthetic("two_moons", 1000, noise=0.1, seed=seed)
            train_set, cls.tests[seed] = dataset.split(0.2, seed)
            for method in cls.methods:
                spec = TrainSpec(method=method, hidden=(16, 16), threat_model=cls.tm, seed=seed)
                cls.nets[method, seed] = train(spec, train_set).classifier

    def _pgd20(self, net, seed):
        test = self.tests[seed]
        return run_attack(preset("pgd20"), net, test.features, test.labels, self.tm, 0).accuracy

    def _mean_over_seeds(self, method, score):
        return np.mean([score(self.nets[method, seed], seed) for seed in self.seeds])

    def _natural(self, net, seed):
        test = self.tests[seed]
        return float(np.mean(net.classify(test.features) == test.labels))

    def test_robust_training_beats_standard_training_under_pgd(self):
        robust = {method: self._mean_over_seeds(method, self._pgd20) for method in self.methods}
        standard, at_pgd = robust[Method.STANDARD], robust[Method.AT_PGD]
        self.assertLessEqual(standard, at_pgd - 0.10, robust)
        for method in self.distributional:
            with self.subTest(method=method):
                self.assertLessEqual(standard, robust[method] - 0.10, robust)
                self.assertGreaterEqual(robust[method], at_pgd - 0.03, robust)

    def test_robust_training_costs_natural_accuracy(self):
        standard = self._mean_over_seeds(Method.STANDARD, self._natural)
        at_pgd = self._mean_over_seeds(Method.AT_PGD, self._natural)
        self.assertLessEqual(at_pgd, standard)

    def test_standard_training_is_sharpest(self):
        test = self.tests[0]
        curvature = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            for method in self.methods:
                net = self.nets[method, 0]
                curvature[method] = np.mean(
                    [
                        dominant_hessian_eigenvalue(net, x, y, rng=i)
                        for i, (x, y) in enumerate(zip(test.features[:50], test.labels[:50]))
                    ]
                )
        for method in (Method.AT_PGD, *self.distributional):
            with self.subTest(method=method):
                self.assertGreater(curvature[Method.STANDARD], curvature[method], curvature)

    def test_distribution_samples_are_more_diverse_than_pgd_restarts(self):
        test = self.tests[0]
        net = self.nets[Method.STANDARD, 0]
        wins = 0
        for i, (x, y) in enumerate(zip(test.features[:50], test.labels[:50])):
            distribution, endpoints = attack_samples(net, x, y, self.tm, count=20, rng=i)
            wins += diversity_l2(distribution) > diversity_l2(endpoints)
        self.assertGreaterEqual(wins, 40)

    def test_transferred_examples_are_weaker_than_white_box_ones(self):
        test = self.tests[0]
        pairs = [
            (Method.STANDARD, Method.AT_PGD),
            (Method.AT_PGD, Method.STANDARD),
            (Method.ADT_EXP, Method.STANDARD),
        ]
        for source, target in pairs:
            with self.subTest(source=source, target=target):
                target_net = self.nets[target, 0]
                transferred = transfer_eval(
                    self.nets[source, 0], target_net, test, preset("pgd20"), self.tm, rng=0
                )
                self.assertGreaterEqual(transferred, self._pgd20(target_net, 0))
