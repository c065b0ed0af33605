import math

import numpy as np
from django.test import SimpleTestCase

from grad_core import ops
from grad_core.exceptions import LabelOutOfRange, NonFiniteError, NonScalarLossError, ShapeError
from grad_core.hessian import hvp, numerical_gradient
from grad_core.losses import cw_margin, kl_divergence, softmax_cross_entropy
from grad_core.nn import Activation, Layer, Network, forward, input_gradient
from grad_core.optim import OptState, adam_step, sgd_momentum_step, step_lr
from grad_core.tape import Tape, backward, value_and_grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


class GradcheckMixin:
    def assertGradcheck(self, fn, *arrays, tol=1e-5):
        """Reverse-mode gradients of ``fn`` match central differences (h=1e-5)."""
        _, grads = value_and_grad(fn, *arrays)
        for position, (array, grad) in enumerate(zip(arrays, grads)):

            def scalar(point, position=position):
                args = list(arrays)
                args[position] = point
                tape = Tape()
                return fn(*[tape.leaf(a) for a in args]).item()

            expected = numerical_gradient(scalar, array, h=1e-5)
            self.assertLess(relative_error(grad, expected), tol, msg=f"argument {position}")


class TapeTestCase(SimpleTestCase):
    def test_sum_of_squares_gradient(self):
        """d/dx sum(x^2) = 2x"""
        tape = Tape()
        x = tape.leaf([1.0, -2.0])
        grads = backward(tape, ops.sum(ops.square(x)))
        np.testing.assert_array_equal(grads[x], [2.0, -4.0])

    def test_unreachable_leaf_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        unused = tape.leaf(np.ones((2, 3)))
        grads = tape.backward(ops.sum(x * 3.0))
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 3)))
        np.testing.assert_array_equal(grads[x], [3.0, 3.0])

    def test_non_scalar_loss_is_rejected(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with self.assertRaises(NonScalarLossError):
            tape.backward(x * 2.0)

    def test_inputs_precede_their_consumers(self):
        tape = Tape()
        x = tape.leaf([0.5, 1.5])
        ops.sum(ops.tanh(x) * ops.exp(x) + ops.log(x))
        for index, node in enumerate(tape.nodes):
            self.assertTrue(all(parent < index for parent in node.inputs))

    def test_non_finite_value_raises(self):
        tape = Tape()
        x = tape.leaf([0.0, 1.0])
        with self.assertRaises(NonFiniteError):
            ops.log(x)

    def test_fresh_tapes_give_identical_gradients(self):
        rng = np.random.default_rng(0)
        net = Network.mlp([3, 5, 2], rng)
        x = rng.normal(size=(4, 3))
        first, second = Tape(), Tape()
        bound_a, bound_b = net.bind(first), net.bind(second)
        grads_a = first.backward(softmax_cross_entropy(bound_a(x), [0, 1, 1, 0]))
        grads_b = second.backward(softmax_cross_entropy(bound_b(x), [0, 1, 1, 0]))
        for pa, pb in zip(bound_a.params, bound_b.params):
            np.testing.assert_array_equal(grads_a[pa], grads_b[pb])


class PrimitiveGradcheckTestCase(GradcheckMixin, SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1234)

    def test_elementwise_primitives(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.uniform(0.5, 2.0, size=(3, 4))
        self.assertGradcheck(lambda x, y: ops.sum(x * y + x - y), a, b)
        self.assertGradcheck(lambda x, y: ops.sum(x / y), a, b)
        self.assertGradcheck(lambda x: ops.sum(ops.tanh(x) * ops.exp(x)), a)
        self.assertGradcheck(lambda y: ops.sum(ops.log(y) + ops.sqrt(y) + y**3), b)
        self.assertGradcheck(lambda x: ops.sum(ops.softplus(x) + ops.sigmoid(x)), a)
        self.assertGradcheck(lambda x: ops.sum(-ops.square(x)), a)

    def test_relu_and_clip_away_from_kinks(self):
        a = self.rng.normal(size=20)
        a[np.abs(a) < 0.05] = 0.5
        self.assertGradcheck(lambda x: ops.sum(ops.relu(x) * x), a)
        b = self.rng.uniform(-2, 2, size=20)
        b[np.abs(np.abs(b) - 1.0) < 0.05] = 0.3
        self.assertGradcheck(lambda x: ops.sum(ops.clip(x, -1.0, 1.0) ** 2), b)

    def test_broadcasting_primitives(self):
        a = self.rng.normal(size=(5, 3))
        bias = self.rng.normal(size=3)
        self.assertGradcheck(lambda x, b: ops.sum(ops.tanh(x + b) * b), a, bias)

    def test_matmul_shapes(self):
        a = self.rng.normal(size=(4, 3))
        w = self.rng.normal(size=(3, 2))
        v = self.rng.normal(size=3)
        self.assertGradcheck(lambda x, y: ops.sum(ops.tanh(x @ y)), a, w)
        self.assertGradcheck(lambda x, y: ops.sum(ops.tanh(x @ y)), v, w)
        self.assertGradcheck(lambda x, y: ops.sum(ops.tanh(x @ y)), a, v)
        self.assertGradcheck(lambda x, y: x @ y, v, v)

    def test_reductions_and_structure(self):
        a = self.rng.normal(size=(4, 3))
        self.assertGradcheck(lambda x: ops.sum(ops.mean(x, axis=0) ** 2), a)
        self.assertGradcheck(lambda x: ops.sum(ops.logsumexp(x, axis=-1)), a)
        self.assertGradcheck(lambda x: ops.sum(ops.reshape(x, (12,)) * np.arange(12.0)), a)
        self.assertGradcheck(
            lambda x: ops.sum(ops.concat([x, ops.tanh(x)], axis=-1) ** 2),
            a,
        )
        self.assertGradcheck(lambda x: ops.sum(ops.getitem(x, (slice(None), slice(1, 3))) ** 2), a)
        self.assertGradcheck(lambda x: ops.sum(ops.pick(x, [0, 2, 1, 1]) ** 3), a)

    def test_max_where_and_cosine(self):
        a = np.array([[0.3, 1.2, -0.4], [2.0, -1.0, 0.7]])
        mask = np.array([[True, True, False], [False, True, True]])
        self.assertGradcheck(lambda x: ops.sum(ops.max_where(x, mask) ** 2), a)
        b = self.rng.normal(size=(2, 3))
        self.assertGradcheck(lambda x, y: ops.sum(ops.cosine_similarity(x, y)), a, b)

    def test_losses(self):
        logits = self.rng.normal(size=(5, 4))
        other = self.rng.normal(size=(5, 4))
        labels = [0, 3, 1, 2, 2]
        self.assertGradcheck(lambda z: softmax_cross_entropy(z, labels), logits)
        self.assertGradcheck(lambda p, q: kl_divergence(p, q), logits, other)
        self.assertGradcheck(lambda z: cw_margin(z, labels), logits)

    def test_three_layer_network(self):
        net = Network.mlp([3, 6, 5, 2], self.rng, hidden=Activation.TANH)
        x = self.rng.normal(size=(4, 3))
        labels = [0, 1, 1, 0]

        def loss(x_var, *params):
            bound = net.bind(x_var.tape, list(params))
            return softmax_cross_entropy(bound(x_var), labels)

        self.assertGradcheck(loss, x, *net.parameters())


class LossTestCase(SimpleTestCase):
    def _ce(self, logits, label):
        tape = Tape()
        return softmax_cross_entropy(tape.leaf(logits), label).item()

    def test_cross_entropy_of_uniform_logits(self):
        self.assertAlmostEqual(self._ce([0.0, 0.0], 0), math.log(2), places=12)

    def test_cross_entropy_confident_logits(self):
        expected = -math.log(math.exp(10) / (math.exp(10) + 1))
        self.assertAlmostEqual(self._ce([10.0, 0.0], 0), expected, places=12)
        self.assertAlmostEqual(self._ce([10.0, 0.0], 0), 4.54e-5, places=7)

    def test_cross_entropy_gradient_at_uniform_logits(self):
        _, (grad,) = value_and_grad(lambda z: softmax_cross_entropy(z, 0), np.zeros(2))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_cross_entropy_shift_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=5)
        for shift in (-7.0, 0.3, 50.0):
            self.assertAlmostEqual(self._ce(logits + shift, 2), self._ce(logits, 2), delta=1e-12)

    def test_label_out_of_range(self):
        with self.assertRaises(LabelOutOfRange):
            self._ce([0.0, 1.0], 2)

    def _kl(self, p, q):
        tape = Tape()
        return kl_divergence(tape.leaf(p), tape.leaf(q)).item()

    def test_kl_self_divergence_is_zero(self):
        self.assertAlmostEqual(self._kl([0.2, -1.0, 3.0], [0.2, -1.0, 3.0]), 0.0, places=14)

    def test_kl_two_term_hand_computation(self):
        p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
        q = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()
        expected = float(np.sum(p * np.log(p / q)))
        self.assertAlmostEqual(self._kl([1.0, 0.0], [0.0, 1.0]), expected, places=12)

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p, q = rng.normal(scale=3.0, size=(2, 4))
            self.assertGreaterEqual(self._kl(p, q), 0.0)

    def test_kl_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            self._kl([0.0, 1.0], [0.0, 1.0, 2.0])

    def test_cw_margin_value(self):
        tape = Tape()
        self.assertEqual(cw_margin(tape.leaf([5.0, 1.0]), 0).item(), -4.0)


class NetworkTestCase(SimpleTestCase):
    def test_identity_layer(self):
        net = Network([Layer(np.eye(2), np.zeros(2), Activation.IDENTITY)])
        logits = forward(net, np.array([1.0, 2.0]), Tape())
        np.testing.assert_array_equal(logits.value, [1.0, 2.0])

    def test_relu_layer_clamps_negatives(self):
        net = Network([Layer(np.eye(2), np.zeros(2), Activation.RELU)])
        logits = forward(net, np.array([-1.0, 3.0]), Tape())
        np.testing.assert_array_equal(logits.value, [0.0, 3.0])

    def test_two_layer_network_matches_hand_rolled_matmul(self):
        net = Network.mlp([2, 3, 2], np.random.default_rng(0))
        w1, b1, w2, b2 = net.parameters()
        x = [1.0, 0.0]
        hidden = [max(0.0, sum(x[i] * w1[i][j] for i in range(2)) + b1[j]) for j in range(3)]
        expected = [sum(hidden[i] * w2[i][j] for i in range(3)) + b2[j] for j in range(2)]
        logits = forward(net, np.array(x), Tape())
        np.testing.assert_allclose(logits.value, expected, rtol=0, atol=1e-14)
        np.testing.assert_allclose(net.predict(np.array(x)), expected, rtol=0, atol=1e-14)

    def test_input_shape_mismatch(self):
        net = Network.mlp([2, 3, 2], np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            forward(net, np.ones(3), Tape())

    def test_layers_must_chain(self):
        with self.assertRaises(ShapeError):
            Network([Layer(np.eye(2), np.zeros(2)), Layer(np.ones((3, 1)), np.zeros(1))])

    def test_same_seed_same_weights(self):
        a = Network.mlp([2, 16, 16, 2], np.random.default_rng(7))
        b = Network.mlp([2, 16, 16, 2], np.random.default_rng(7))
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_with_parameters_keeps_parameter_count(self):
        net = Network.mlp([2, 4, 2], np.random.default_rng(0))
        updated = net.with_parameters([p + 1.0 for p in net.parameters()])
        self.assertEqual(updated.parameter_count, net.parameter_count)
        with self.assertRaises(ShapeError):
            net.with_parameters(net.parameters()[:-1])

    def test_input_gradient_is_per_row(self):
        net = Network.mlp([2, 4, 2], np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(3, 2))
        losses, grad = input_gradient(
            net, x, lambda z: softmax_cross_entropy(z, [0, 1, 0], reduction="none")
        )
        self.assertEqual(losses.shape, (3,))
        for row in range(3):
            _, single = input_gradient(
                net, x[row], lambda z, row=row: softmax_cross_entropy(z, [0, 1, 0][row], "none")
            )
            np.testing.assert_allclose(grad[row], single, atol=1e-14)


class OptimizerTestCase(SimpleTestCase):
    def test_plain_sgd(self):
        state = OptState.sgd([np.zeros(1)], lr=0.1, momentum=0.0)
        params, _ = sgd_momentum_step([np.zeros(1)], [np.ones(1)], state)
        np.testing.assert_allclose(params[0], [-0.1])

    def test_momentum_accumulates(self):
        state = OptState.sgd([np.zeros(1)], lr=0.1, momentum=0.9)
        params = [np.zeros(1)]
        params, state = sgd_momentum_step(params, [np.ones(1)], state)
        params, state = sgd_momentum_step(params, [np.ones(1)], state)
        np.testing.assert_allclose(state.slots[0], [1.9])
        self.assertEqual(state.step, 2)

    def test_weight_decay_alone(self):
        state = OptState.sgd([np.ones(1)], lr=1.0, momentum=0.0, weight_decay=0.1)
        params, _ = sgd_momentum_step([np.ones(1)], [np.zeros(1)], state)
        np.testing.assert_allclose(params[0], [0.9])

    def test_adam_first_step_moves_by_learning_rate(self):
        state = OptState.adam([np.zeros(3)], lr=0.3)
        params, _ = adam_step([np.zeros(3)], [np.array([0.5, -2.0, 1e-3])], state)
        np.testing.assert_allclose(np.abs(params[0]), 0.3, rtol=1e-4)

    def test_adam_without_momentum_normalizes_gradient(self):
        g = np.array([0.25, -4.0])
        state = OptState.adam([np.zeros(2)], lr=0.3, betas=(0.0, 0.0))
        params, _ = adam_step([np.zeros(2)], [g], state)
        np.testing.assert_allclose(params[0], -0.3 * g / (np.abs(g) + 1e-8))

    def test_adam_zero_gradient_is_a_fixed_point(self):
        theta = np.array([1.5, -0.5])
        state = OptState.adam([theta], lr=0.3)
        params, state = adam_step([theta], [np.zeros(2)], state)
        np.testing.assert_array_equal(params[0], theta)
        self.assertEqual(state.step, 1)

    def test_adam_maximize_ascends(self):
        state = OptState.adam([np.zeros(1)], lr=0.1)
        params, _ = adam_step([np.zeros(1)], [np.ones(1)], state, maximize=True)
        self.assertGreater(params[0][0], 0.0)

    def test_shape_mismatch(self):
        state = OptState.sgd([np.zeros(2)], lr=0.1)
        with self.assertRaises(ShapeError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], state)

    def test_step_schedule(self):
        self.assertEqual(step_lr(0.1, 10, [75], 0.1), 0.1)
        self.assertAlmostEqual(step_lr(0.1, 75, [75], 0.1), 0.01)


class HessianVectorProductTestCase(SimpleTestCase):
    def _quadratic(self):
        # loss = 1/2 |Wx|^2 with W = diag(sqrt 3, 1) gives H = diag(3, 1)
        net = Network([Layer(np.diag([math.sqrt(3.0), 1.0]), np.zeros(2))])
        return net, lambda z: 0.5 * ops.sum(ops.square(z))

    def test_quadratic(self):
        net, loss = self._quadratic()
        product = hvp(net, loss, np.array([0.4, -0.2]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(product, [3.0, 0.0], atol=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        net = Network.mlp([4, 8, 3], rng, hidden=Activation.TANH)
        x = rng.normal(size=4)

        def loss(z):
            return softmax_cross_entropy(z, 1)

        for _ in range(5):
            u, v = rng.normal(size=(2, 4))
            self.assertAlmostEqual(v @ hvp(net, loss, x, u), u @ hvp(net, loss, x, v), delta=1e-6)

    def test_matches_dense_finite_difference_hessian(self):
        rng = np.random.default_rng(6)
        net = Network.mlp([4, 6, 3], rng, hidden=Activation.TANH)
        x = rng.normal(size=4)
        h = 1e-3

        def value(point):
            return softmax_cross_entropy(forward(net, point, Tape()), 2).item()

        dense = np.zeros((4, 4))
        basis = np.eye(4)
        for i in range(4):
            for j in range(4):
                dense[i, j] = (
                    value(x + h * basis[i] + h * basis[j])
                    - value(x + h * basis[i] - h * basis[j])
                    - value(x - h * basis[i] + h * basis[j])
                    + value(x - h * basis[i] - h * basis[j])
                ) / (4 * h * h)
        v = rng.normal(size=4)
        product = hvp(net, lambda z: softmax_cross_entropy(z, 2), x, v)
        self.assertLess(relative_error(product, dense @ v), 1e-3)

    def test_zero_direction(self):
        net, loss = self._quadratic()
        with self.assertRaises(ValueError):
            hvp(net, loss, np.zeros(2), np.zeros(2))
