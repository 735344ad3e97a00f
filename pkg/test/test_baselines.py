import os
import tempfile
import unittest
import warnings
from unittest import mock

import numpy as np
import pytest

from simtransfer.eap import (BaselineKind, CheckpointError, ConfigurationError,
                             EnvInstance, NonFiniteError, PPOConfig,
                             PPOLearner, RngStreams, baseline_test_input,
                             collect_rollouts, ppo_update, sample_population,
                             train_baseline)
from simtransfer.eap.baselines import (ORACLE, build_baseline_state, load_state,
                                       save_state, warn_oracle)
from simtransfer.eap.dynamics import cartpole_descriptor, override_descriptor

PPO = PPOConfig(rollout_steps_per_update=128, minibatch_size=64,
                epochs_per_update=2)


def small_population(k_train=3):
    d = override_descriptor(cartpole_descriptor(), max_steps=100)
    return sample_population(d, k_train, 1, 2, seed=1)


class Test_baseline_kind(unittest.TestCase):

    def test_input_dims(self):
        d = cartpole_descriptor()
        assert BaselineKind("dr").input_dim(d) == 4
        assert BaselineKind("up").input_dim(d) == 4 + 3 + 3

    def test_unknown_kind(self):
        with self.assertRaises(ConfigurationError):
            BaselineKind("eap")

    def test_train_input(self):
        d = cartpole_descriptor()
        params = d.reference_params
        state = np.arange(4.0)
        np.testing.assert_array_equal(
            BaselineKind("dr").train_input(params)(state), state)
        np.testing.assert_array_equal(
            BaselineKind("up").train_input(params)(state),
            np.concatenate([state, params.mu, params.nu]))


class Test_baseline_test_input(unittest.TestCase):

    def setUp(self):
        self.d = cartpole_descriptor()
        self.params = self.d.reference_params

    def test_dr_tail_is_empty(self):
        assert baseline_test_input("dr", self.d, self.params.mu).size == 0

    def test_up_midpoint(self):
        tail = baseline_test_input("up", self.d, self.params.mu,
                                   self.params.nu)
        np.testing.assert_array_equal(tail[:3], self.params.mu)
        np.testing.assert_allclose(tail[3:], [0.01, 0.025, 0.025])

    def test_up_oracle(self):
        tail = baseline_test_input("up",
                                   self.d,
                                   self.params.mu,
                                   self.params.nu,
                                   mode=ORACLE)
        np.testing.assert_array_equal(
            tail, np.concatenate([self.params.mu, self.params.nu]))

    def test_oracle_needs_nu(self):
        with self.assertRaises(ConfigurationError):
            baseline_test_input("up", self.d, self.params.mu, mode=ORACLE)

    def test_oracle_warning(self):
        with pytest.warns(UserWarning, match="oracle"):
            warn_oracle(ORACLE)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            warn_oracle("midpoint")


@pytest.mark.parametrize("kind", ["dr", "up"])
def test_budget_is_never_exceeded(kind):
    state = train_baseline(kind, small_population(), PPO, 300, seed=0,
                           hidden_sizes=[8])
    # 128 + 128, the 44-step remainder is below one minibatch
    assert state.policy_samples == 256
    assert state.iteration == 2
    assert state.learner.n_updates == 2


def test_single_environment_dr_is_plain_ppo():
    population = small_population(k_train=1)
    state = train_baseline("dr", population, PPO, 256, seed=4,
                           hidden_sizes=[8])

    streams = RngStreams(4)
    learner = PPOLearner.build(4, [8], 1, PPO, streams["init"])
    params = population.entries[0]
    for _ in range(2):
        streams["sampler"].integers(1)
        env = EnvInstance(population.descriptor, params, rng=streams["env"])
        buffer = collect_rollouts(learner.policy, env, 128,
                                  lambda s: s, streams["policy"])
        ppo_update(learner, buffer, PPO, streams["minibatch"])

    for name, value in learner.policy.parameters().items():
        np.testing.assert_array_equal(value, state.policy.parameters()[name])


def test_failed_batch_still_counts():
    with mock.patch("simtransfer.eap.baselines.ppo_update",
                    side_effect=NonFiniteError("non-finite loss")):
        state = train_baseline("dr", small_population(), PPO, 256, seed=0,
                               hidden_sizes=[8])
    assert state.failed_iterations == 2
    assert state.policy_samples == 256


def test_budget_must_be_positive():
    with pytest.raises(ConfigurationError):
        build_baseline_state("dr", small_population(), PPO, 0, seed=0)


class Test_baseline_checkpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "ckpt.nc")
        self.population = small_population()

    def tearDown(self):
        self.tmp.cleanup()

    def test_resume_is_bit_exact(self):
        straight = train_baseline("up", self.population, PPO, 384, seed=2,
                                  hidden_sizes=[8])
        first = train_baseline("up", self.population, PPO, 256, seed=2,
                               hidden_sizes=[8])
        save_state(first, self.path)
        resumed = build_baseline_state("up", self.population, PPO, 384, 2,
                                       hidden_sizes=[8])
        load_state(resumed, self.path)
        assert resumed.policy_samples == 256
        train_baseline("up", self.population, PPO, 384, state=resumed)
        for name, value in straight.policy.parameters().items():
            np.testing.assert_array_equal(value,
                                          resumed.policy.parameters()[name])

    def test_wrong_method(self):
        save_state(train_baseline("dr", self.population, PPO, 128, seed=0,
                                  hidden_sizes=[8]), self.path)
        other = build_baseline_state("up", self.population, PPO, 128, 0,
                                     hidden_sizes=[8])
        with self.assertRaises(CheckpointError):
            load_state(other, self.path)
