import numpy as np
from django.test import SimpleTestCase
from pydantic import ValidationError
from scipy import integrate, stats

from grad_core.exceptions import ShapeError
from grad_core.nn import Activation, Layer, Network
from grad_core.tape import Tape
from perturb_dist.explicit import (
    SIGMA_FLOOR,
    TanhGaussianParams,
    amortized_explicit_params,
    entropy_estimate,
    explicit_density,
    explicit_generator,
    inner_objective_exp,
    inverse_softplus,
    neg_log_density,
    sample_explicit,
)
from perturb_dist.implicit import (
    ImplicitSampler,
    VariationalPosterior,
    entropy_lower_bound,
    entropy_lower_bound_graph,
    sample_implicit,
)
from perturb_dist.threat import ThreatModel


def gauss_hermite_mean(fn, degree=80):
    """``E[fn(r)]`` for ``r ~ N(0, 1)``."""
    nodes, weights = np.polynomial.hermite.hermgauss(degree)
    return np.sum(weights * fn(np.sqrt(2.0) * nodes)) / np.sqrt(np.pi)


def linear_margin_net(w):
    """Two logits on a 1-D input whose margin ``z1 - z0`` is ``w * x``."""
    return Network([Layer(np.array([[0.0, w]]), np.zeros(2))])


class ThreatModelTestCase(SimpleTestCase):
    def test_epsilon_must_be_positive(self):
        with self.assertRaises(ValidationError) as ctx:
            ThreatModel(epsilon=-0.1)
        self.assertEqual(ctx.exception.errors()[0]["loc"], ("epsilon",))

    def test_pixel_box_order(self):
        with self.assertRaises(ValidationError):
            ThreatModel(epsilon=0.1, pixel_box=(1.0, 0.0))

    def test_project_clips_ball_then_box(self):
        tm = ThreatModel(epsilon=0.3, pixel_box=(0.0, 1.0))
        delta = tm.project(np.array([0.9, 0.5, 0.1]), np.array([0.5, -0.1, -0.5]))
        np.testing.assert_allclose(delta, [0.1, -0.1, -0.1])
        self.assertTrue(tm.contains(np.array([0.9, 0.5, 0.1]), delta))


class TanhGaussianParamsTestCase(SimpleTestCase):
    def test_initial_distribution(self):
        params = TanhGaussianParams.initial((3, 2))
        np.testing.assert_array_equal(params.mu, np.zeros((3, 2)))
        np.testing.assert_allclose(params.sigma, np.ones((3, 2)), rtol=1e-14)

    def test_clipping_enforces_bounds(self):
        rng = np.random.default_rng(0)
        params = TanhGaussianParams(rng.normal(scale=20, size=500), rng.normal(scale=20, size=500))
        clipped = params.clipped()
        self.assertFalse(params.within_bounds())
        self.assertTrue(clipped.within_bounds())

    def test_clipping_keeps_interior_entries(self):
        params = TanhGaussianParams(np.array([0.5, 9.0]), inverse_softplus(np.array([0.7, 1e-6])))
        clipped = params.clipped()
        self.assertEqual(clipped.mu[0], 0.5)
        self.assertEqual(clipped.sigma_raw[0], params.sigma_raw[0])
        self.assertEqual(clipped.mu[1], 4.0)
        self.assertAlmostEqual(clipped.sigma[1], SIGMA_FLOOR, delta=1e-15)


class SampleExplicitTestCase(SimpleTestCase):
    def test_collapsed_distribution_is_near_zero(self):
        tm = ThreatModel(epsilon=8 / 255)
        params = TanhGaussianParams.from_sigma(np.zeros(4), np.full(4, SIGMA_FLOOR))
        delta, _ = sample_explicit(params, tm, np.random.default_rng(0), k=100)
        self.assertLess(np.max(np.abs(delta)), tm.epsilon * 1e-2)

    def test_samples_stay_strictly_inside_the_ball(self):
        """Extreme locations and scales still never reach the boundary."""
        rng = np.random.default_rng(1)
        tm = ThreatModel(epsilon=0.1)
        params = TanhGaussianParams.from_sigma(
            rng.uniform(-4, 4, size=(1000, 2)), rng.uniform(SIGMA_FLOOR, 4, size=(1000, 2))
        )
        delta, _ = sample_explicit(params, tm, rng, k=50)
        self.assertLess(np.max(np.abs(delta)), tm.epsilon)

    def test_mean_matches_quadrature(self):
        tm = ThreatModel(epsilon=8 / 255)
        params = TanhGaussianParams.from_sigma(np.array([2.0, -2.0]), np.full(2, 0.1))
        delta, _ = sample_explicit(params, tm, np.random.default_rng(2), k=100_000)
        for j, mu in enumerate((2.0, -2.0)):
            expected = gauss_hermite_mean(lambda r, mu=mu: tm.epsilon * np.tanh(mu + 0.1 * r))
            standard_error = delta[:, j].std() / np.sqrt(delta.shape[0])
            self.assertLess(abs(delta[:, j].mean() - expected), 3 * standard_error)

    def test_same_stream_same_samples(self):
        tm = ThreatModel(epsilon=0.1)
        params = TanhGaussianParams.initial(3)
        a, _ = sample_explicit(params, tm, np.random.default_rng(9), k=5)
        b, _ = sample_explicit(params, tm, np.random.default_rng(9), k=5)
        np.testing.assert_array_equal(a, b)


class DensityTestCase(SimpleTestCase):
    def test_neg_log_density_hand_values(self):
        params = TanhGaussianParams.initial(1)
        value = neg_log_density(params, ThreatModel(epsilon=8 / 255), np.zeros(1))
        self.assertAlmostEqual(value, 0.5 * np.log(2 * np.pi) + np.log(8 / 255), places=12)
        self.assertAlmostEqual(value, -2.5429, places=4)
        unit = neg_log_density(params, ThreatModel(epsilon=1.0), np.zeros(1))
        self.assertAlmostEqual(unit, 0.9189385, places=7)

    def test_neg_log_density_matches_closed_form_density(self):
        tm = ThreatModel(epsilon=0.2)
        params = TanhGaussianParams.from_sigma(np.array([0.4]), np.array([0.7]))
        delta, r = sample_explicit(params, tm, np.random.default_rng(3), k=200)
        from_noise = np.exp(-neg_log_density(params, tm, r))
        closed_form = explicit_density(delta[:, 0], 0.4, 0.7, tm.epsilon)
        np.testing.assert_allclose(from_noise, closed_form, rtol=1e-9)

    def test_density_integrates_to_one(self):
        """Substituting ``delta = eps * tanh(u)`` keeps the integrand smooth for quadrature."""
        epsilon = 8 / 255
        for mu in (-1.0, 0.0, 1.0):
            for sigma in (0.3, 1.0, 3.0):

                def integrand(u, mu=mu, sigma=sigma):
                    jacobian = epsilon * (1.0 - np.tanh(u) ** 2)
                    density = explicit_density(epsilon * np.tanh(u), mu, sigma, epsilon)
                    return float(density * jacobian)

                lo, hi = max(mu - 12 * sigma, -18.0), min(mu + 12 * sigma, 18.0)
                total, _ = integrate.quad(integrand, lo, hi, points=[mu], limit=200)
                self.assertAlmostEqual(total, 1.0, delta=1e-6, msg=f"mu={mu} sigma={sigma}")

    def test_histogram_matches_closed_form(self):
        tm = ThreatModel(epsilon=0.25)
        mu, sigma = 0.5, 0.8
        params = TanhGaussianParams.from_sigma(np.array([mu]), np.array([sigma]))
        delta, _ = sample_explicit(params, tm, np.random.default_rng(4), k=1_000_000)
        edges = np.linspace(-tm.epsilon, tm.epsilon, 41)
        counts, _ = np.histogram(delta[:, 0], bins=edges)
        width = edges[1] - edges[0]
        with np.errstate(divide="ignore"):
            cdf = stats.norm.cdf(np.arctanh(edges / tm.epsilon), loc=mu, scale=sigma)
        expected = np.diff(cdf) / width
        observed = counts / delta.shape[0] / width
        self.assertLess(np.max(np.abs(observed - expected)), 0.02 * expected.max())

    def test_entropy_estimate_is_mean_neg_log_density(self):
        tm = ThreatModel(epsilon=0.1)
        params = TanhGaussianParams.initial((2, 3))
        estimate = entropy_estimate(params, tm, 10, np.random.default_rng(5))
        _, r = sample_explicit(params, tm, np.random.default_rng(5), k=10)
        np.testing.assert_allclose(estimate, neg_log_density(params, tm, r).mean(axis=0))
        self.assertEqual(estimate.shape, (2,))


class InnerObjectiveTestCase(SimpleTestCase):
    def setUp(self):
        self.tm = ThreatModel(epsilon=0.5)
        self.mu, self.sigma, self.w = 0.3, 0.5, 1.5
        self.params = TanhGaussianParams.from_sigma(np.array([self.mu]), np.array([self.sigma]))

    def _estimate(self, k, seed=0, lam=0.0):
        return inner_objective_exp(
            linear_margin_net(self.w),
            np.array([0.2]),
            0,
            self.params,
            self.tm,
            lam,
            k,
            np.random.default_rng(seed),
            loss="cw_margin",
        )

    def test_zero_entropy_weight_is_mean_loss(self):
        estimate = self._estimate(50)
        np.testing.assert_allclose(estimate.value, estimate.loss, rtol=1e-12)

    def test_entropy_term_is_additive(self):
        estimate = self._estimate(50, lam=1.0)
        np.testing.assert_allclose(estimate.value - estimate.loss, estimate.entropy, atol=1e-12)

    def test_pathwise_gradient_matches_quadrature(self):
        eps, mu, sigma, w = self.tm.epsilon, self.mu, self.sigma, self.w
        slope = gauss_hermite_mean(lambda r: 1.0 - np.tanh(mu + sigma * r) ** 2)
        slope_r = gauss_hermite_mean(lambda r: (1.0 - np.tanh(mu + sigma * r) ** 2) * r)
        sigma_raw_scale = stats.logistic.cdf(self.params.sigma_raw[0])

        estimate = self._estimate(100_000)
        self.assertAlmostEqual(estimate.grad_mu[0] / (eps * w * slope), 1.0, delta=0.01)
        expected_sigma = eps * w * slope_r * sigma_raw_scale
        self.assertAlmostEqual(estimate.grad_sigma_raw[0] / expected_sigma, 1.0, delta=0.05)

    def test_gradient_error_shrinks_with_samples(self):
        eps, mu, sigma, w = self.tm.epsilon, self.mu, self.sigma, self.w
        exact = eps * w * gauss_hermite_mean(lambda r: 1.0 - np.tanh(mu + sigma * r) ** 2)
        for k in (100, 1_000, 10_000, 100_000):
            estimate = self._estimate(k, seed=k)
            per_sample = eps * w * (1.0 - np.tanh(mu + sigma * estimate.noise[:, 0, 0]) ** 2)
            self.assertAlmostEqual(estimate.grad_mu[0], per_sample.mean(), delta=1e-12)
            standard_error = per_sample.std() / np.sqrt(k)
            self.assertLess(abs(estimate.grad_mu[0] - exact), 4 * standard_error, msg=f"k={k}")

    def test_expected_loss_never_beats_the_worst_point(self):
        """A distribution over the ball cannot do better than its best single point."""
        rng = np.random.default_rng(6)
        tm = ThreatModel(epsilon=0.3)
        net = Network([Layer(np.array([[-1.2, 1.2]]), np.array([0.1, -0.1]))])
        x = np.array([0.4])
        grid = x + np.linspace(-tm.epsilon, tm.epsilon, 10_000)[:, None]
        logits = net.predict(grid)
        worst = np.max(np.logaddexp(logits[:, 0], logits[:, 1]) - logits[:, 0])
        for _ in range(100):
            params = TanhGaussianParams.from_sigma(
                rng.uniform(-4, 4, size=1), rng.uniform(SIGMA_FLOOR, 4, size=1)
            )
            estimate = inner_objective_exp(net, x, 0, params, tm, 0.0, 2000, rng)
            standard_error = estimate.samples.std() / np.sqrt(2000)
            self.assertLessEqual(estimate.total, worst + 3 * standard_error)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            inner_objective_exp(
                linear_margin_net(1.0),
                np.array([0.2]),
                0,
                TanhGaussianParams.initial(2),
                self.tm,
                0.0,
                3,
                np.random.default_rng(0),
            )


class AmortizedExplicitTestCase(SimpleTestCase):
    def _inputs(self, rows=4, dim=2):
        rng = np.random.default_rng(7)
        shape = (rows, dim)
        return rng.uniform(size=shape), rng.normal(size=shape), rng.normal(size=shape)

    def test_zero_generator(self):
        x, g1, g2 = self._inputs()
        params = amortized_explicit_params(Network.zeros([6, 5, 4]), x, g1, g2)
        np.testing.assert_array_equal(params.mu, np.zeros((4, 2)))
        np.testing.assert_allclose(params.sigma, np.full((4, 2), np.log(2.0)))

    def test_output_heads(self):
        self.assertEqual(explicit_generator(3, np.random.default_rng(0)).output_dim, 6)

    def test_params_respond_to_inputs(self):
        x, g1, g2 = self._inputs()
        gen = explicit_generator(2, np.random.default_rng(8), hidden=(16,))
        before = amortized_explicit_params(gen, x, g1, g2)
        after = amortized_explicit_params(gen, x + 1e-3, g1, g2)
        self.assertFalse(np.allclose(before.mu, after.mu))
        self.assertTrue(after.within_bounds())

    def test_generator_shape_mismatch(self):
        x, g1, g2 = self._inputs()
        with self.assertRaises(ShapeError):
            amortized_explicit_params(explicit_generator(3, np.random.default_rng(0)), x, g1, g2)


class ImplicitSamplerTestCase(SimpleTestCase):
    def _tiled(self, rows, dim=2):
        rng = np.random.default_rng(10)
        x, g1, g2 = rng.uniform(size=dim), rng.normal(size=dim), rng.normal(size=dim)
        return np.tile(x, (rows, 1)), np.tile(g1, (rows, 1)), np.tile(g2, (rows, 1))

    def test_generator_that_ignores_noise(self):
        sampler = ImplicitSampler.build(2, np.random.default_rng(0), z_dim=3, hidden=(8,))
        params = sampler.generator.parameters()
        params[0] = params[0].copy()
        params[0][:3] = 0.0
        constant = ImplicitSampler(sampler.generator.with_parameters(params), z_dim=3)
        delta, z = sample_implicit(
            constant, *self._tiled(50), ThreatModel(epsilon=0.1), np.random.default_rng(1)
        )
        self.assertGreater(np.ptp(z), 0.0)
        np.testing.assert_allclose(delta, np.tile(delta[0], (50, 1)), rtol=0, atol=1e-15)

    def test_samples_stay_strictly_inside_the_ball(self):
        sampler = ImplicitSampler.build(2, np.random.default_rng(2), z_dim=4, hidden=(8,))
        params = [50.0 * p for p in sampler.generator.parameters()]
        loud = sampler.generator.with_parameters(params)
        tm = ThreatModel(epsilon=0.1)
        delta, _ = sample_implicit(
            ImplicitSampler(loud, 4), *self._tiled(10_000), tm, np.random.default_rng(3)
        )
        self.assertLess(np.max(np.abs(delta)), tm.epsilon)

    def test_distinct_noise_gives_distinct_samples(self):
        generator = Network.mlp([4 + 6, 16, 2], np.random.default_rng(4), hidden=Activation.TANH)
        delta, _ = sample_implicit(
            ImplicitSampler(generator, 4),
            *self._tiled(2000),
            ThreatModel(epsilon=0.1),
            np.random.default_rng(5),
        )
        pairs = delta.reshape(1000, 2, 2)
        self.assertTrue(np.all(np.any(pairs[:, 0] != pairs[:, 1], axis=-1)))

    def test_generator_must_match_noise_dim(self):
        with self.assertRaises(ShapeError):
            ImplicitSampler(Network.zeros([7, 2]), z_dim=4)


class EntropyLowerBoundTestCase(SimpleTestCase):
    def _posterior(self, slope, log_std):
        layer = Layer(np.array([[slope, 0.0]]), np.array([0.0, log_std]))
        return VariationalPosterior(Network([layer]))

    def test_standard_normal_at_its_mean(self):
        value = entropy_lower_bound(self._posterior(1.0, 0.0), np.zeros(1), np.zeros(1))
        self.assertAlmostEqual(value, -0.5 * np.log(2 * np.pi), places=12)

    def test_grid_search_recovers_the_inverse_generator(self):
        epsilon = 0.1
        z = np.random.default_rng(11).uniform(-1, 1, size=(2000, 1))
        delta = epsilon * z
        slopes = np.linspace(0.0, 20.0, 41)
        log_stds = np.linspace(-5.0, 2.0, 29)
        values = np.array(
            [
                [entropy_lower_bound(self._posterior(a, s), z, delta).mean() for s in log_stds]
                for a in slopes
            ]
        )
        best_a, best_s = np.unravel_index(np.argmax(values), values.shape)
        self.assertEqual(slopes[best_a], 10.0)
        self.assertEqual(log_stds[best_s], -5.0)
        self.assertAlmostEqual(values.max(), 5.0 - 0.5 * np.log(2 * np.pi), delta=1e-2)

    def test_dropping_the_constant_leaves_gradients_unchanged(self):
        q = VariationalPosterior.build(2, 3, np.random.default_rng(12), hidden=(8,))
        rng = np.random.default_rng(13)
        z, delta = rng.uniform(-1, 1, size=(5, 3)), rng.normal(scale=0.1, size=(5, 2))
        grads = []
        for constant in (0.0, 123.0):
            tape = Tape()
            bound = q.q_net.bind(tape)
            bound_value = entropy_lower_bound_graph(bound, z, delta).mean() + constant
            result = tape.backward(bound_value)
            grads.append([result[p] for p in bound.params])
        for without, with_constant in zip(*grads):
            np.testing.assert_array_equal(without, with_constant)

    def test_graph_and_array_versions_agree(self):
        q = VariationalPosterior.build(2, 3, np.random.default_rng(14), hidden=(8,))
        rng = np.random.default_rng(15)
        z, delta = rng.uniform(-1, 1, size=(5, 3)), rng.normal(scale=0.1, size=(5, 2))
        tape = Tape()
        graph = entropy_lower_bound_graph(q.q_net.bind(tape), z, delta)
        np.testing.assert_allclose(graph.value, entropy_lower_bound(q, z, delta), rtol=1e-12)
