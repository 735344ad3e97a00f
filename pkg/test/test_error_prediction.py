import unittest

import numpy as np
import pytest

from simtransfer.eap import (ConfigurationError, ContractError, DimensionError,
                             EnvInstance, ErrorDataset, ErrorFnConfig,
                             ErrorPredictor, ErrorSample, GaussianPolicyHead,
                             collect_error_data, error_loss, predict_error,
                             train_error_fn)
from simtransfer.eap.dynamics import cartpole_descriptor
from simtransfer.eap.error_prediction import FULL, PROJECTED, RunningNormalizer


def _sample(rng, source=-1, state_dim=4, mu_dim=3):
    s0 = rng.standard_normal(state_dim)
    return ErrorSample(s0=s0,
                       a0=rng.standard_normal(1),
                       sT_val=s0 + 0.1,
                       sT_ref=s0 + 0.3,
                       mu=rng.standard_normal(mu_dim),
                       source=source)


class Test_error_config(unittest.TestCase):

    def test_defaults(self):
        config = ErrorFnConfig()
        assert config.horizon == 5
        assert config.representation == FULL

    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            ErrorFnConfig(horizon=0)
        with self.assertRaises(ConfigurationError):
            ErrorFnConfig(representation="sparse")
        with self.assertRaises(ConfigurationError):
            ErrorFnConfig(samples_per_refresh=100, capacity=50)


class Test_error_sample(unittest.TestCase):

    def test_target_is_reference_minus_validation(self):
        z = _sample(np.random.default_rng(0))
        np.testing.assert_allclose(z.target, np.full(4, 0.2))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            ErrorSample(np.zeros(4), np.zeros(1), np.zeros(3), np.zeros(4),
                        np.zeros(3))

    def test_non_finite_target(self):
        with self.assertRaises(ContractError):
            ErrorSample(np.zeros(2), np.zeros(1), np.zeros(2),
                        np.array([np.inf, 0.0]), np.zeros(1))


class Test_error_dataset(unittest.TestCase):

    def test_fifo_eviction(self):
        rng = np.random.default_rng(1)
        dataset = ErrorDataset(capacity=5)
        dataset.add([_sample(rng, source=i) for i in range(4)])
        dataset.add([_sample(rng, source=i) for i in range(4, 7)])
        assert len(dataset) == 5
        assert dataset.total_added == 7
        assert [z.source for z in dataset.samples] == [2, 3, 4, 5, 6]
        assert [z.source for z in dataset.recent(2)] == [5, 6]

    def test_too_many_at_once(self):
        rng = np.random.default_rng(1)
        dataset = ErrorDataset(capacity=2)
        with self.assertRaises(ContractError):
            dataset.add([_sample(rng) for _ in range(3)])

    def test_provenance_and_frame(self):
        rng = np.random.default_rng(2)
        dataset = ErrorDataset()
        dataset.add([_sample(rng, source=s) for s in (10, 10, 11)])
        assert dataset.provenance() == {10: 2, 11: 1}
        frame = dataset.to_frame()
        assert len(frame) == 3
        assert "sT_ref_3" in frame.columns and "mu_2" in frame.columns

    def test_arrays(self):
        rng = np.random.default_rng(3)
        dataset = ErrorDataset()
        dataset.add([_sample(rng) for _ in range(6)])
        inputs, targets = dataset.arrays()
        assert inputs.shape == (6, 4 + 1 + 3)
        assert targets.shape == (6, 4)


def test_normalizer_chunking_does_not_matter():
    data = np.random.default_rng(4).normal(3.0, 2.0, size=(100, 3))
    whole = RunningNormalizer(3).update(data)
    pieces = RunningNormalizer(3)
    for chunk in np.array_split(data, 7):
        pieces.update(chunk)
    np.testing.assert_allclose(whole.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(whole.std, data.std(axis=0), rtol=1e-12)
    np.testing.assert_allclose(pieces.mean, whole.mean, rtol=1e-12)
    np.testing.assert_allclose(pieces.std, whole.std, rtol=1e-12)


def test_normalizer_floor():
    constant = RunningNormalizer(2, min_std=1e-3).update(np.ones((10, 2)))
    np.testing.assert_array_equal(constant.std, [1e-3, 1e-3])


class Test_error_predictor(unittest.TestCase):

    def _predictor(self, variant, latent_dim=None):
        return ErrorPredictor(variant, 4, 1, 3, [16, 8], 5,
                              np.random.default_rng(0),
                              latent_dim=latent_dim)

    def test_fresh_full_predictor_outputs_zero(self):
        e = predict_error(self._predictor(FULL), np.ones(4), np.ones(1),
                          np.ones(3))
        np.testing.assert_array_equal(e, np.zeros(4))

    def test_fresh_projected_predictor_outputs_zero(self):
        predictor = self._predictor(PROJECTED, latent_dim=2)
        s = np.random.default_rng(1).standard_normal((6, 4))
        np.testing.assert_array_equal(
            predictor.predict(s, np.ones((6, 1)), np.ones((6, 3))),
            np.zeros((6, 2)))
        dataset = ErrorDataset(capacity=100)
        dataset.add(_linear_dataset(np.random.default_rng(2), 32))
        train_error_fn(predictor, dataset,
                       ErrorFnConfig(epochs_per_refresh=1, minibatch_size=16),
                       np.random.default_rng(3))
        e = predictor.predict(s, np.ones((6, 1)), np.ones((6, 3)))
        assert np.any(np.abs(e) > 1e-6)

    def test_projected_latent_shape(self):
        predictor = self._predictor(PROJECTED, latent_dim=2)
        assert predictor.error_dim == 2
        e = predictor.predict(np.ones((5, 4)), np.ones((5, 1)), np.ones((5, 3)))
        assert e.shape == (5, 2)
        assert predictor.reconstruct(np.ones(4), np.ones(1),
                                     np.ones(3)).shape == (4,)

    def test_projected_needs_latent_dim(self):
        with self.assertRaises(ConfigurationError):
            self._predictor(PROJECTED)

    def test_freeze_at_zero(self):
        predictor = self._predictor(PROJECTED, latent_dim=2).freeze_at_zero()
        np.testing.assert_array_equal(
            predictor.predict(np.ones(4), np.ones(1), np.ones(3)), np.zeros(2))

    def test_dimension_check(self):
        with self.assertRaises(DimensionError):
            self._predictor(FULL).predict(np.ones(3), np.ones(1), np.ones(3))


def test_error_loss():
    assert error_loss(np.zeros((2, 2)), np.array([[1.0, 1.0], [2.0,
                                                               0.0]])) == 3.0
    assert error_loss(np.zeros(3), np.ones(3)) == 3.0


def _linear_dataset(rng, n):
    weights = rng.standard_normal((8, 4))
    samples = []
    for _ in range(n):
        s0 = rng.uniform(-1, 1, 4)
        a0 = rng.uniform(-1, 1, 1)
        mu = rng.uniform(-1, 1, 3)
        target = np.concatenate([s0, a0, mu]) @ weights
        samples.append(ErrorSample(s0, a0, np.zeros(4), target, mu))
    return samples


def test_predictor_fits_linear_targets():
    rng = np.random.default_rng(5)
    samples = _linear_dataset(rng, 1200)
    train, held = samples[:1000], samples[1000:]
    dataset = ErrorDataset(capacity=1000)
    dataset.add(train)
    config = ErrorFnConfig(epochs_per_refresh=200,
                           minibatch_size=64,
                           lr=3e-3,
                           samples_per_refresh=1000,
                           capacity=1000)
    predictor = ErrorPredictor(FULL, 4, 1, 3, [32, 16], 5,
                               np.random.default_rng(6))
    loss = train_error_fn(predictor, dataset, config, np.random.default_rng(7))
    # normalized units: four unit-variance target components
    assert loss < 0.2
    inputs, targets = ErrorDataset().arrays(held)
    pred = predictor.predict(inputs[:, :4], inputs[:, 4:5], inputs[:, 5:])
    relative = error_loss(pred, targets) / error_loss(
        np.zeros_like(targets), targets - targets.mean(axis=0))
    assert relative < 0.05


class Test_train_error_fn(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(8)
        self.dataset = ErrorDataset(capacity=100)
        self.dataset.add(_linear_dataset(self.rng, 40))
        self.config = ErrorFnConfig(epochs_per_refresh=2,
                                    minibatch_size=16,
                                    samples_per_refresh=40,
                                    capacity=100)

    def test_frozen_is_noop(self):
        predictor = ErrorPredictor(FULL, 4, 1, 3, [8], 5,
                                   np.random.default_rng(0)).freeze_at_zero()
        before = {k: v.copy() for k, v in predictor.net.parameters().items()}
        assert train_error_fn(predictor, self.dataset, self.config,
                              self.rng) == 0.0
        for k, v in predictor.net.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_normalizers_absorb_only_new_samples(self):
        predictor = ErrorPredictor(FULL, 4, 1, 3, [8], 5,
                                   np.random.default_rng(0))
        train_error_fn(predictor, self.dataset, self.config, self.rng)
        assert predictor.target_normalizer.count == 40
        train_error_fn(predictor, self.dataset, self.config, self.rng)
        assert predictor.target_normalizer.count == 40
        self.dataset.add(_linear_dataset(self.rng, 10))
        train_error_fn(predictor, self.dataset, self.config, self.rng)
        assert predictor.target_normalizer.count == 50
        assert predictor.n_updates == 3

    def test_too_small(self):
        predictor = ErrorPredictor(FULL, 4, 1, 3, [8], 5,
                                   np.random.default_rng(0))
        small = ErrorDataset()
        small.add(_linear_dataset(self.rng, 5))
        with self.assertRaises(ContractError):
            train_error_fn(predictor, small, self.config, self.rng)


class Test_collect_error_data(unittest.TestCase):

    def setUp(self):
        self.d = cartpole_descriptor()
        self.policy = GaussianPolicyHead.build(4 + 3 + 4, [8], 1,
                                               np.random.default_rng(0))
        self.starts = np.random.default_rng(1).uniform(-0.05, 0.05, (16, 4))

    def test_identical_environments_give_zero_error(self):
        ref = self.d.reference_params
        samples, skipped = collect_error_data(self.policy, self.d, ref, ref,
                                              self.starts, 5, 20,
                                              np.random.default_rng(2), 4)
        assert skipped == 0
        assert len(samples) == 20
        for z in samples:
            np.testing.assert_array_equal(z.target, np.zeros(4))

    def test_matches_manual_paired_rollout(self):
        ref = self.d.reference_params
        values = dict(self.d.reference_values, trans_friction=0.05,
                      rot_damping=0.02)
        val = self.d.params_from_values(values, "train")
        samples, _ = collect_error_data(self.policy,
                                        self.d,
                                        ref,
                                        val,
                                        self.starts,
                                        3,
                                        1,
                                        np.random.default_rng(3),
                                        4,
                                        source=7)
        z = samples[0]
        pick = np.random.default_rng(3).integers(16, size=1)[0]
        np.testing.assert_array_equal(z.s0, self.starts[pick])
        finals = []
        for params in (val, ref):
            env = EnvInstance(self.d, params)
            env.set_state(self.starts[pick])
            for _ in range(3):
                obs = np.concatenate([env.state, params.mu, np.zeros(4)])
                env.advance(self.policy.mean(obs))
            finals.append(env.state)
        np.testing.assert_array_equal(z.sT_val, finals[0])
        np.testing.assert_array_equal(z.sT_ref, finals[1])
        assert z.source == 7
        assert not np.array_equal(z.target, np.zeros(4))

    def test_swapping_environments_negates_targets(self):
        ref = self.d.reference_params
        values = dict(self.d.reference_values, pole_length=0.45,
                      rot_damping=0.015)
        val = self.d.params_from_values(values, "train")
        forward, _ = collect_error_data(self.policy, self.d, ref, val,
                                        self.starts, 4, 6,
                                        np.random.default_rng(5), 4)
        swapped, _ = collect_error_data(self.policy, self.d, val, ref,
                                        self.starts, 4, 6,
                                        np.random.default_rng(5), 4)
        assert len(forward) == len(swapped) == 6
        for a, b in zip(forward, swapped):
            np.testing.assert_array_equal(a.target, -b.target)

    def test_one_step_friction_gap_sign(self):
        ref = self.d.reference_params
        moving = np.array([[0.0, 1.0, 0.0, 0.0]])
        for friction in (0.005, 0.04):
            values = dict(self.d.reference_values, trans_friction=friction)
            val = self.d.params_from_values(values, "train")
            samples, _ = collect_error_data(self.policy, self.d, ref, val,
                                            moving, 1, 1,
                                            np.random.default_rng(0), 4)
            gap = friction - dict(self.d.reference_values)["trans_friction"]
            assert samples[0].target[1] != 0.0
            assert np.sign(samples[0].target[1]) == np.sign(gap)

    def test_empty_start_pool(self):
        ref = self.d.reference_params
        with self.assertRaises(ContractError):
            collect_error_data(self.policy, self.d, ref, ref, np.zeros((0, 4)),
                               5, 4, np.random.default_rng(0), 4)


@pytest.mark.parametrize("horizon", [1, 5])
def test_zero_policy_collects_requested_count(horizon):
    d = cartpole_descriptor()
    policy = GaussianPolicyHead.build(11, [8], 1, np.random.default_rng(0))
    starts = np.zeros((1, 4))
    samples, skipped = collect_error_data(policy, d, d.reference_params,
                                          d.reference_params, starts, horizon,
                                          8, np.random.default_rng(0), 4)
    assert len(samples) + skipped == 8


class ZeroForce:

    def mean(self, obs):
        return np.zeros(1)


def test_friction_gap_accumulates_with_horizon():
    d = cartpole_descriptor()
    values = dict(d.reference_values, trans_friction=0.05)
    val = d.params_from_values(values, "train")
    starts = np.zeros((8, 4))
    starts[:, 1] = np.linspace(0.5, 1.5, 8)
    norms = []
    for horizon in range(1, 9):
        samples, skipped = collect_error_data(ZeroForce(), d,
                                              d.reference_params, val, starts,
                                              horizon, 16,
                                              np.random.default_rng(0), 4)
        assert skipped == 0
        norms.append(np.mean([np.linalg.norm(z.target) for z in samples]))
    assert norms[0] > 0.0
    assert np.all(np.diff(norms) >= 0.0)


def test_normalizer_round_trip():
    rng = np.random.default_rng(9)
    normalizer = RunningNormalizer(3).update(rng.normal(5.0, 3.0, (50, 3)))
    x = rng.normal(5.0, 3.0, (20, 3))
    np.testing.assert_allclose(normalizer.denormalize(normalizer.normalize(x)),
                               x, rtol=0.0, atol=1e-10)
    y = rng.standard_normal((20, 3))
    np.testing.assert_allclose(normalizer.normalize(normalizer.denormalize(y)),
                               y, rtol=0.0, atol=1e-10)
