import math
import unittest

import numpy as np
import pytest

from simtransfer.eap import (ConfigurationError, ContractError, DimensionError,
                             EnvInstance, PerturbationSpec, get_descriptor,
                             integrate, override_descriptor, remap_split)
from simtransfer.eap.dynamics import (cartpole_descriptor, hopper_descriptor,
                                      pendulum_descriptor)


def frictionless_cartpole(descriptor=None):
    descriptor = descriptor or cartpole_descriptor()
    values = dict(descriptor.reference_values)
    values.update(rot_damping=0.0, rot_friction=0.0, trans_friction=0.0)
    return descriptor, descriptor.params_from_values(values, "train")


def oracle_step(descriptor, params, state, action):
    """One control step with 100x finer sub-steps."""
    model = descriptor.model
    values = descriptor.values_of(params)
    pos, vel = model.decode(state)
    pos, vel = integrate(descriptor, values, pos, vel, tuple(action), 0.0,
                         substeps=100 * descriptor.substeps)
    return model.encode(pos, vel)


class Test_descriptors(unittest.TestCase):

    def test_cartpole_layout(self):
        d = cartpole_descriptor()
        assert d.state_dim == 4
        assert d.action_dim == 1
        assert d.observable_names == ["pole_length", "pole_mass", "cart_mass"]
        assert d.nu_dim == 3
        assert d.dt == 0.02
        assert d.max_steps == 500

    def test_pendulum_layout(self):
        d = pendulum_descriptor()
        assert d.state_dim == 3
        assert d.action_dim == 1
        assert d.observable_names == ["pole_length", "pole_mass"]
        assert d.unobservable_names == [
            "joint_damping", "dry_friction", "gravity_scale"
        ]
        # reference within train ranges, so construction succeeds
        assert d.reference_params.mu.size == 2

    def test_hopper_layout(self):
        d = hopper_descriptor()
        assert (d.state_dim, d.action_dim) == (2, 1)
        assert d.mu_dim == 2 and d.nu_dim == 3
        assert d.max_steps == 400

    def test_range_endpoints(self):
        d = pendulum_descriptor()
        mu = d.reference_params.mu
        d.make_params(mu, [0.0, 0.0, 0.9], "train")
        d.make_params(mu, [0.1, 0.05, 1.1], "train")
        with self.assertRaises(ValueError):
            d.make_params(mu, [0.11, 0.0, 1.0], "train")
        with self.assertRaises(ValueError):
            d.make_params(mu, [-0.01, 0.0, 1.0], "any")

    def test_dimension_mismatch(self):
        d = cartpole_descriptor()
        with self.assertRaises(DimensionError):
            d.make_params([0.5, 0.1], [0.0, 0.0, 0.0])

    def test_unknown_task(self):
        with self.assertRaises(ConfigurationError):
            get_descriptor("walker")

    def test_test_ranges_reach_outside(self):
        for task in ("cartpole", "pendulum", "hopper"):
            for spec in get_descriptor(task).param_specs:
                assert spec.outside_pieces()

    def test_override(self):
        d = override_descriptor(cartpole_descriptor(),
                                max_steps=100,
                                train_ranges={"pole_length": (0.5, 0.6)})
        assert d.max_steps == 100
        assert d.spec("pole_length").train_range == (0.5, 0.6)
        with self.assertRaises(ConfigurationError):
            override_descriptor(d, train_ranges={"pole_lenght": (0.5, 0.6)})


class Test_remap_split(unittest.TestCase):

    def test_swap_membership(self):
        d = remap_split(cartpole_descriptor(),
                        ["pole_length", "pole_mass", "rot_damping"])
        assert d.mu_dim == 3 and d.nu_dim == 3
        assert "rot_damping" in d.observable_names
        assert "cart_mass" in d.unobservable_names

    def test_all_observable(self):
        d = cartpole_descriptor()
        remapped = remap_split(d, d.param_names)
        assert remapped.nu_dim == 0
        assert remapped.mu_dim == 6

    def test_unknown_name(self):
        with self.assertRaises(ConfigurationError):
            remap_split(cartpole_descriptor(), ["pole_lenght"])

    def test_values_survive_remap(self):
        d = cartpole_descriptor()
        remapped = remap_split(d, ["cart_mass", "trans_friction"])
        assert remapped.values_of(remapped.reference_params) == d.values_of(
            d.reference_params)


class Test_step(unittest.TestCase):

    def test_upright_rest_is_fixed(self):
        d, params = frictionless_cartpole()
        env = EnvInstance(d, params, rng=0)
        env.set_state([0.0, 0.0, 0.0, 0.0])
        state, reward, done = env.step([0.0])
        np.testing.assert_array_equal(state, np.zeros(4))
        assert reward == 1.0
        assert not done

    def test_hanging_rest_is_fixed(self):
        d = pendulum_descriptor()
        values = dict(d.reference_values)
        values.update(joint_damping=0.0, dry_friction=0.0)
        env = EnvInstance(d, d.params_from_values(values), rng=0)
        start = env.set_state([math.cos(math.pi), math.sin(math.pi), 0.0])
        state, _, _ = env.step([0.0])
        np.testing.assert_allclose(state, start, atol=1e-12)

    def test_matches_fine_oracle_single_case(self):
        d = cartpole_descriptor()
        params = d.reference_params
        env = EnvInstance(d, params, rng=0)
        s0 = np.array([0.0, 0.0, 0.05, 0.0])
        env.set_state(s0)
        state, _, _ = env.step([0.0])
        np.testing.assert_allclose(state, oracle_step(d, params, s0, [0.0]),
                                   atol=1e-4)

    def test_stepping_done_episode(self):
        d = cartpole_descriptor()
        env = EnvInstance(d, d.reference_params, rng=0)
        with self.assertRaises(ContractError):
            env.step([0.0])
        env.set_state([0.0, 0.0, 0.25, 0.0])
        _, reward, done = env.step([0.0])
        assert done and env.terminated and not env.truncated
        assert reward == 0.0
        with self.assertRaises(ContractError):
            env.step([0.0])

    def test_action_clipping_flag(self):
        d = cartpole_descriptor()
        env = EnvInstance(d, d.reference_params, rng=0)
        env.reset()
        env.step([25.0])
        assert env.last_action_clipped
        env.step([1.0])
        assert not env.last_action_clipped
        assert env.clip_count == 1
        with self.assertRaises(DimensionError):
            env.step([1.0, 2.0])

    def test_episode_length_bounded(self):
        d = override_descriptor(pendulum_descriptor(), max_steps=30)
        env = EnvInstance(d, d.reference_params, rng=1)
        rng = np.random.default_rng(2)
        for _ in range(3):
            env.reset()
            while not env.done:
                env.step(rng.uniform(-2.0, 2.0, size=1))
            assert env.step_count == 30
            assert env.truncated

    def test_hopper_flight_is_ballistic(self):
        d = hopper_descriptor()
        params = d.reference_params
        env = EnvInstance(d, params, rng=0)
        env.set_state([1.5, 0.0])
        state, reward, done = env.step([50.0])
        h = d.dt / d.substeps
        n = d.substeps
        g = 9.81
        # semi-implicit Euler under constant acceleration
        np.testing.assert_allclose(state,
                                   [1.5 - g * h * h * n * (n + 1) / 2, -g * d.dt],
                                   rtol=0,
                                   atol=1e-12)
        assert not done

    def test_hopper_reward_at_apex(self):
        d = hopper_descriptor()
        values = dict(d.reference_values)
        model = d.model
        assert model.reward(values, (1.2,), (0.0,), np.zeros(1)) == 1.0
        assert model.failed(values, (0.25,), (0.0,))

    def test_set_state_validation(self):
        d = pendulum_descriptor()
        env = EnvInstance(d, d.reference_params)
        with self.assertRaises(DimensionError):
            env.set_state([1.0, 0.0])
        with self.assertRaises(ContractError):
            env.set_state([2.0, 0.0, 0.0])
        with self.assertRaises(ContractError):
            env.set_state([np.nan, 0.0, 0.0])

    def test_advance_skips_bookkeeping(self):
        d = cartpole_descriptor()
        env = EnvInstance(d, d.reference_params)
        env.set_state([0.0, 0.0, 0.5, 0.0])
        env.advance([0.0])
        assert env.step_count == 0
        assert not env.done


def _battery(descriptor, n, state_scale, action_scale, seed, coulomb=()):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        values = {
            spec.name: rng.uniform(*spec.train_range)
            for spec in descriptor.param_specs
        }
        # smoothed Coulomb terms switch sign inside one control step
        values.update({name: 0.0 for name in coulomb})
        params = descriptor.params_from_values(values, "train")
        yield params, rng.uniform(-state_scale, state_scale), rng.uniform(
            -action_scale, action_scale, size=1)


def test_cartpole_oracle_battery():
    d = cartpole_descriptor()
    for params, s, a in _battery(d, 1000, 0.01, 0.1, 10,
                                 coulomb=("rot_friction",)):
        env = EnvInstance(d, params)
        s0 = np.full(4, s)
        env.set_state(s0)
        state = env.advance(a)
        np.testing.assert_allclose(state, oracle_step(d, params, s0, a),
                                   rtol=0,
                                   atol=1e-4)


def test_pendulum_oracle_battery():
    d = pendulum_descriptor()
    for params, s, a in _battery(d, 1000, 0.002, 0.02, 11,
                                 coulomb=("dry_friction",)):
        env = EnvInstance(d, params)
        theta = math.pi + s
        s0 = np.array([math.cos(theta), math.sin(theta), s])
        env.set_state(s0)
        state = env.advance(a)
        np.testing.assert_allclose(state, oracle_step(d, params, s0, a),
                                   rtol=0,
                                   atol=1e-4)


def test_integrator_is_first_order():
    d = cartpole_descriptor()
    values = dict(d.reference_values)
    model = d.model
    pos, vel = model.decode([0.1, 0.5, 0.1, -0.3])
    exact = model.encode(*integrate(d, values, pos, vel, (3.0,), substeps=3200))
    coarse = model.encode(*integrate(d, values, pos, vel, (3.0,), substeps=4))
    fine = model.encode(*integrate(d, values, pos, vel, (3.0,), substeps=8))
    ratio = np.linalg.norm(coarse - exact) / np.linalg.norm(fine - exact)
    assert 1.7 < ratio < 2.3


def test_pendulum_energy_sanity():
    d = pendulum_descriptor()
    values = dict(d.reference_values)
    values.update(pole_length=1.2,
                  joint_damping=0.0,
                  dry_friction=0.0,
                  gravity_scale=0.9)
    params = d.params_from_values(values, "train")
    env = EnvInstance(d, params)
    length, mass, g = 1.2, values["pole_mass"], 9.81 * 0.9
    inertia = mass * length * length / 3.0

    def energy(state):
        # potential measured from the hanging position
        theta = math.atan2(state[1], state[0])
        return (0.5 * inertia * state[2]**2 + mass * g * 0.5 * length *
                (1.0 + math.cos(theta)))

    theta0 = math.pi - 2.5
    env.set_state([math.cos(theta0), math.sin(theta0), 0.0])
    e0 = energy(env.state)
    drift = 0.0
    for _ in range(200):
        drift = max(drift, abs(energy(env.advance([0.0])) - e0))
    assert drift < 0.02 * e0


def test_trans_friction_never_speeds_up():
    d = cartpole_descriptor()
    low = dict(d.reference_values, trans_friction=0.0)
    high = dict(d.reference_values, trans_friction=0.05)
    rng = np.random.default_rng(5)
    for _ in range(200):
        x_dot = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0)
        s0 = [rng.uniform(-1, 1), x_dot, rng.uniform(-0.1, 0.1),
              rng.uniform(-0.5, 0.5)]
        speeds = []
        for values in (low, high):
            env = EnvInstance(d, d.params_from_values(values, "train"))
            env.set_state(s0)
            speeds.append(abs(env.advance([0.0])[1]))
        assert speeds[1] <= speeds[0]


def test_nu_changes_transitions():
    d = cartpole_descriptor()
    base = dict(d.reference_values)
    other = dict(base, rot_damping=0.02, trans_friction=0.05)
    battery = [[0.0, 1.0, 0.05, 0.5], [0.5, -0.5, -0.05, 1.0]]
    differs = False
    for s0 in battery:
        states = []
        for values in (base, other):
            env = EnvInstance(d, d.params_from_values(values, "train"))
            env.set_state(s0)
            states.append(env.advance([1.0]))
        differs |= bool(np.max(np.abs(states[0] - states[1])) > 1e-6)
    assert differs


class Test_reset(unittest.TestCase):

    def test_cartpole_bounds(self):
        d = cartpole_descriptor()
        env = EnvInstance(d, d.reference_params, rng=3)
        for _ in range(100):
            s = env.reset()
            assert np.all(np.abs(s) <= 0.05)
            assert env.step_count == 0

    def test_pendulum_initial_state(self):
        d = pendulum_descriptor()
        env = EnvInstance(d, d.reference_params, rng=3)
        s = env.reset()
        theta = math.atan2(s[1], s[0]) % (2 * math.pi)
        assert abs(theta - math.pi) <= 0.1
        assert s[2] == 0.0

    def test_same_seed_same_state(self):
        d = cartpole_descriptor()
        a = EnvInstance(d, d.reference_params, rng=7).reset()
        b = EnvInstance(d, d.reference_params, rng=7).reset()
        np.testing.assert_array_equal(a, b)

    def test_uniform_mean(self):
        d = cartpole_descriptor()
        env = EnvInstance(d, d.reference_params, rng=11)
        n = 10000
        states = np.array([env.reset() for _ in range(n)])
        sigma = 0.1 / math.sqrt(12.0)
        assert np.all(np.abs(states.mean(axis=0)) < 4 * sigma / math.sqrt(n))


@pytest.mark.parametrize("task", ["cartpole", "pendulum", "hopper"])
def test_trajectories_are_deterministic(task):
    d = get_descriptor(task)
    runs = []
    for _ in range(2):
        env = EnvInstance(d, d.reference_params, rng=21)
        actions = np.random.default_rng(4)
        states = [env.reset()]
        while not env.done:
            states.append(
                env.step(actions.uniform(d.action_low, d.action_high))[0])
        runs.append(np.array(states))
    np.testing.assert_array_equal(runs[0], runs[1])


def test_perturbation_changes_trajectory():
    plain = cartpole_descriptor()
    pushed = override_descriptor(plain,
                                 perturbation=PerturbationSpec((5.0, 5.0), 3))
    finals = []
    for d in (plain, pushed):
        env = EnvInstance(d, d.reference_params, rng=2)
        env.reset()
        for _ in range(d.max_steps):
            env.step([0.0])
            if env.done:
                break
        finals.append((env.step_count, env.state))
    assert finals[0][0] != finals[1][0] or not np.array_equal(
        finals[0][1], finals[1][1])


def test_perturbation_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec((2.0, 1.0))
    with pytest.raises(ValueError):
        PerturbationSpec((1.0, 2.0), duration_steps=0)
