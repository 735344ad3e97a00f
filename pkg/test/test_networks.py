import math
import unittest

import numpy as np
import pytest

from simtransfer.eap import (AdamState, BottleneckNet, DimensionError,
                             FeedforwardNet, GaussianPolicyHead,
                             NonFiniteError, clip_grad_norm,
                             finite_difference_gradients, gaussian_mean,
                             gaussian_sample, optimizer_step)


def _relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / scale


def _check_gradients(net, x, seed):
    """Analytic against central-difference gradients of a random linear
    functional of the output."""
    rng = np.random.default_rng(seed)
    w_out = rng.standard_normal(net.forward(x).shape)

    def loss():
        return float(np.sum(w_out * net.forward(x)))

    net.forward(x)
    grads, _ = net.backward(w_out)
    numeric = finite_difference_gradients(loss, net.parameters(), h=1e-5)
    for name, g in grads.items():
        assert _relative_error(g, numeric[name]) < 1e-4, name


class Test_forward(unittest.TestCase):

    def test_matches_matrix_arithmetic(self):
        rng = np.random.default_rng(0)
        net = FeedforwardNet([4, 32, 16, 1], rng)
        x = rng.standard_normal((7, 4))
        w0, w1, w2 = net.weights
        b0, b1, b2 = net.biases
        expected = np.tanh(np.tanh(x @ w0 + b0) @ w1 + b1) @ w2 + b2
        np.testing.assert_allclose(net.forward(x), expected, rtol=0, atol=1e-12)

    def test_single_row(self):
        rng = np.random.default_rng(1)
        net = FeedforwardNet([3, 5, 2], rng)
        x = rng.standard_normal(3)
        assert net.forward(x).shape == (2,)
        np.testing.assert_array_equal(net.forward(x), net.forward(x[None])[0])

    def test_no_rng_means_zero(self):
        net = FeedforwardNet([3, 4, 2])
        np.testing.assert_array_equal(net.forward(np.ones(3)), np.zeros(2))

    def test_wrong_input_dim(self):
        net = FeedforwardNet([3, 4, 2], np.random.default_rng(0))
        with self.assertRaises(DimensionError):
            net.forward(np.ones(4))

    def test_orthogonal_init(self):
        net = FeedforwardNet([8, 8, 1], np.random.default_rng(3))
        w = net.weights[0] / math.sqrt(2.0)
        np.testing.assert_allclose(w.T @ w, np.eye(8), atol=1e-12)

    def test_copy_is_independent(self):
        net = FeedforwardNet([2, 3, 1], np.random.default_rng(0))
        clone = net.copy()
        clone.weights[0][0, 0] += 1.0
        assert net.weights[0][0, 0] != clone.weights[0][0, 0]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("sizes", [[4, 32, 16, 1], [7, 32, 16, 4], [3, 8, 1]])
def test_feedforward_gradients(seed, sizes):
    rng = np.random.default_rng(seed)
    net = FeedforwardNet(sizes, rng)
    net.biases = [rng.normal(scale=0.1, size=b.shape) for b in net.biases]
    _check_gradients(net, rng.standard_normal((5, sizes[0])), seed + 100)


@pytest.mark.parametrize("seed", range(10))
def test_bottleneck_gradients(seed):
    rng = np.random.default_rng(seed)
    net = BottleneckNet(7, [16, 8], 2, 4, rng, output_gain=1.0)
    _check_gradients(net, rng.standard_normal((5, 7)), seed + 200)


def test_linear_net_input_gradient():
    rng = np.random.default_rng(4)
    net = FeedforwardNet([3, 5, 4, 2],
                         rng,
                         hidden_activation="identity",
                         output_activation="identity")
    x = rng.standard_normal(3)
    w_out = rng.standard_normal(2)
    net.forward(x)
    _, input_grad = net.backward(w_out)
    product = net.weights[0] @ net.weights[1] @ net.weights[2]
    np.testing.assert_allclose(input_grad, product @ w_out, atol=1e-12)


def test_bottleneck_requires_narrow_latent():
    with pytest.raises(ValueError):
        BottleneckNet(5, [8], 4, 4)


def test_bottleneck_parameter_roundtrip():
    rng = np.random.default_rng(5)
    a = BottleneckNet(5, [8], 2, 4, rng)
    b = BottleneckNet(5, [8], 2, 4, np.random.default_rng(6))
    b.set_parameters(a.parameters())
    x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(a.forward(x), b.forward(x))
    np.testing.assert_array_equal(a.encode(x), b.encode(x))


class Test_gaussian_policy(unittest.TestCase):

    def setUp(self):
        self.policy = GaussianPolicyHead.build(3, [8], 2,
                                               np.random.default_rng(0),
                                               log_std=-0.5)

    def test_log_prob_matches_density(self):
        obs = np.array([0.1, -0.2, 0.3])
        action = np.array([0.5, -0.5])
        mean = self.policy.mean(obs)
        std = math.exp(-0.5)
        expected = sum(-0.5 * ((a - m) / std)**2 - math.log(std) -
                       0.5 * math.log(2 * math.pi)
                       for a, m in zip(action, mean))
        assert math.isclose(self.policy.log_prob(obs, action), expected,
                            rel_tol=1e-12)

    def test_sample_log_prob_consistent(self):
        rng = np.random.default_rng(1)
        obs = np.zeros((4, 3))
        actions, logp = self.policy.sample(obs, rng)
        np.testing.assert_allclose(logp, self.policy.log_prob(obs, actions),
                                   rtol=1e-12)

    def test_log_std_is_clamped(self):
        params = dict(self.policy.parameters())
        params["log_std"] = np.array([-9.0, 4.0])
        self.policy.set_parameters(params)
        np.testing.assert_array_equal(self.policy.log_std, [-5.0, 1.0])

    def test_density_integrates_to_one(self):
        policy = GaussianPolicyHead.build(3, [8], 1, np.random.default_rng(3),
                                          log_std=-0.2)
        obs = np.array([0.3, -0.1, 0.2])
        center = policy.mean(obs)[0]
        grid = np.linspace(center - 12.0, center + 12.0, 4001)
        density = np.exp(policy.log_prob(np.tile(obs, (grid.size, 1)),
                                         grid[:, None]))
        total = np.sum(density) * (grid[1] - grid[0])
        assert abs(total - 1.0) < 1e-3

    def test_module_level_sampling(self):
        obs = np.full((20000, 3), 0.2)
        actions, logp = gaussian_sample(self.policy, obs,
                                        np.random.default_rng(2))
        mean = gaussian_mean(self.policy, obs[0])
        np.testing.assert_allclose(actions.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(actions.std(axis=0), math.exp(-0.5),
                                   rtol=0.03)
        assert logp.shape == (20000,)
        same, _ = self.policy.sample(obs[:5], np.random.default_rng(2))
        np.testing.assert_array_equal(same, actions[:5])

    def test_entropy(self):
        expected = 2 * (-0.5 + 0.5 * math.log(2 * math.pi * math.e))
        assert math.isclose(self.policy.entropy(), expected)


class Test_adam(unittest.TestCase):

    def test_first_step_size(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = AdamState.for_params(params, lr=0.1)
        new, opt = optimizer_step(opt, params, {"w": np.array([1.0, 1.0])})
        np.testing.assert_allclose(new["w"],
                                   params["w"] - 0.1 / (1.0 + 1e-8),
                                   rtol=1e-12)
        assert opt.step == 1

    def test_zero_gradient_is_noop(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = AdamState.for_params(params)
        new, _ = optimizer_step(opt, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_pure(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = AdamState.for_params(params)
        grads = {"w": np.array([0.3, 0.4])}
        a, opt_a = optimizer_step(opt, params, grads)
        b, opt_b = optimizer_step(opt, params, grads)
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(opt_a.m["w"], opt_b.m["w"])
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert opt.step == 0

    def test_converges_on_quadratic(self):
        params = {"x": np.array([3.0, -4.0])}
        opt = AdamState.for_params(params, lr=0.01)
        for _ in range(2000):
            params, opt = optimizer_step(opt, params, {"x": 2.0 * params["x"]})
        assert np.all(np.abs(params["x"]) < 1e-2)

    def test_non_finite_gradient(self):
        params = {"w": np.zeros(2)}
        opt = AdamState.for_params(params)
        with self.assertRaises(NonFiniteError):
            optimizer_step(opt, params, {"w": np.array([np.nan, 0.0])})

    def test_name_mismatch(self):
        params = {"w": np.zeros(2)}
        opt = AdamState.for_params(params)
        with self.assertRaises(DimensionError):
            optimizer_step(opt, params, {"v": np.zeros(2)})


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    same, _ = clip_grad_norm(grads, 10.0)
    assert same is grads
