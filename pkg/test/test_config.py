import os
import tempfile
import unittest
import warnings
from unittest import mock

import numpy as np
import pytest

from simtransfer.eap import (ConfigurationError, RngStreams, default_config,
                             dump_config, load_ablation_spec, load_config)
from simtransfer.eap.config import (OUTPUT_ROOT_ENV, apply_overrides,
                                    from_dict, to_dict)


class Test_default_config(unittest.TestCase):

    def test_defaults(self):
        config = default_config()
        assert config.env.task == "cartpole"
        assert config.run.method == "eap"
        assert config.error_fn.horizon == 5
        assert config.ppo.entropy_coef == 0.0
        assert default_config("pendulum").ppo.entropy_coef == 0.005

    def test_error_dim(self):
        config = default_config("hopper")
        assert config.error_dim() == 2
        config.error_fn.representation = "projected"
        assert config.error_dim() == config.descriptor().error_latent_dim

    def test_estimated_budget(self):
        config = default_config()
        config.eap.pretrain_budget = 100
        config.eap.iterations = 2
        config.ppo.rollout_steps_per_update = 50
        config.error_fn.horizon = 3
        config.error_fn.samples_per_refresh = 10
        assert config.estimated_eap_budget() == 100 + 2 * (50 + 2 * 3 * 10)


class Test_resolve(unittest.TestCase):

    def test_fills_placeholders(self):
        with mock.patch.dict(os.environ, {OUTPUT_ROOT_ENV: "/data/runs"}):
            config = default_config("pendulum").resolve()
        assert config.env.observable == config.descriptor().observable_names
        assert config.env.max_steps == 200
        assert config.eap.pretrain_threshold == -300.0
        assert config.eval.return_bounds == [-1600.0, -150.0]
        assert config.eval.seed == config.run.seed
        assert config.baseline.budget == config.estimated_eap_budget()
        assert config.run.output_dir == "/data/runs"

    def test_is_idempotent(self):
        once = default_config().resolve()
        assert to_dict(once.resolve()) == to_dict(once)

    def test_match_run_budget(self):
        with tempfile.TemporaryDirectory() as tmp:
            with open(os.path.join(tmp, "metrics.csv"), "w") as f:
                f.write("schema,total_samples\n1,500\n1,1234\n")
            config = default_config(method="dr")
            config.baseline.match_run = tmp
            assert config.resolve().baseline.budget == 1234


class Test_overrides(unittest.TestCase):

    def test_values_are_yaml(self):
        data = apply_overrides(to_dict(default_config()), [
            "net.hidden_sizes=[64, 64]", "ppo.policy_lr=1e-4",
            "eap.freeze_predictor=true", "eap.reference_index=null"
        ])
        config = from_dict(data)
        assert config.net.hidden_sizes == [64, 64]
        assert config.ppo.policy_lr == 1e-4
        assert config.eap.freeze_predictor is True
        assert config.eap.reference_index is None

    def test_aliases(self):
        config = from_dict(
            apply_overrides({}, ["seed=3", "method=up", "task=hopper",
                                 "error_fn.T=2"]))
        assert config.run.seed == 3
        assert config.run.method == "up"
        assert config.env.task == "hopper"
        assert config.error_fn.horizon == 2

    def test_unknown_keys(self):
        for item in ("ppo.learning_rate=1", "physics.g=9.8", "seed", "horizon=3"):
            with self.assertRaises(ConfigurationError):
                apply_overrides({}, [item])

    def test_input_is_not_modified(self):
        data = to_dict(default_config())
        apply_overrides(data, ["seed=9"])
        assert data["run"]["seed"] == 0


@pytest.mark.parametrize("data", [
    {"ppo": {"gamma": 2.0}},
    {"run": {"method": "sac"}},
    {"run": {"seed": "zero"}},
    {"net": {"hidden_sizes": 32}},
    {"eap": {"freeze_predictor": "yes"}},
    {"eval": {"return_bounds": [1.0, 0.0]}},
    {"eval": {"return_bounds": "guess"}},
    {"eval": {"return_bounds": 5.0}},
    {"env": {"heldout_vary": "all"}},
    {"env": {"k_train": 0}},
    {"solver": {}},
    {"version": 2},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigurationError):
        from_dict(data)


def test_unknown_task_fails_on_descriptor():
    config = from_dict({"env": {"task": "acrobot"}})
    with pytest.raises(ConfigurationError):
        config.descriptor()


def test_file_round_trip():
    config = default_config("hopper", "up").resolve()
    with tempfile.TemporaryDirectory() as tmp:
        path = dump_config(config, os.path.join(tmp, "config.yaml"))
        assert to_dict(load_config(path)) == to_dict(config)
        assert load_config(path, ["seed=5"]).run.seed == 5


def test_missing_or_broken_file():
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(ConfigurationError):
            load_config(os.path.join(tmp, "absent.yaml"))
        path = os.path.join(tmp, "broken.yaml")
        with open(path, "w") as f:
            f.write("env: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_config(path)


class Test_rng_streams(unittest.TestCase):

    def test_streams_are_independent(self):
        a = RngStreams(0)
        b = RngStreams(0)
        a["env"].random(1000)
        np.testing.assert_array_equal(a["policy"].random(5),
                                      b["policy"].random(5))

    def test_names_and_seeds_differ(self):
        streams = RngStreams(0)
        assert not np.array_equal(streams["env"].random(5),
                                  streams["policy"].random(5))
        assert not np.array_equal(RngStreams(1)["env"].random(5),
                                  RngStreams(0)["env"].random(5))

    def test_state_round_trip(self):
        streams = RngStreams(4)
        streams["sampler"].integers(10, size=7)
        saved = streams.state_dict()
        expected = streams["sampler"].integers(10, size=5)
        restored = RngStreams(4)
        restored.load_state_dict(saved)
        np.testing.assert_array_equal(restored["sampler"].integers(10, size=5),
                                      expected)

    def test_seed_for_is_stable(self):
        assert RngStreams(2).seed_for("eval") == RngStreams(2).seed_for("eval")


CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.mark.parametrize("name", ["cartpole_eap.yaml", "cartpole_dr.yaml",
                                  "cartpole_up.yaml", "pendulum_eap.yaml"])
def test_shipped_configs_load(name):
    config = load_config(os.path.join(CONFIG_DIR, name)).resolve()
    assert config.run.method == name.split("_")[1].split(".")[0]


@pytest.mark.parametrize("name", ["horizon.yaml", "representation_horizon.yaml",
                                  "mu_split.yaml", "reference_choice.yaml"])
def test_shipped_ablations_load(name):
    spec, base, _ = load_ablation_spec(os.path.join(CONFIG_DIR, "ablations",
                                                    name))
    assert spec.n_runs >= 4
    assert load_config(base).env.task == "cartpole"


def test_unmatched_baseline_budget_warns():
    with pytest.warns(UserWarning, match="baseline.match_run"):
        config = load_config(os.path.join(CONFIG_DIR, "cartpole_dr.yaml")).resolve()
    assert config.baseline.budget == config.estimated_eap_budget()


@pytest.mark.parametrize("overrides", [["baseline.budget=5000"], ["method=eap"]])
def test_budget_without_estimate_is_quiet(overrides):
    config = load_config(os.path.join(CONFIG_DIR, "cartpole_dr.yaml"), overrides)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        resolved = config.resolve()
    assert resolved.baseline.budget > 0


def test_estimated_bounds_survive_resolve():
    config = from_dict({"eval": {"return_bounds": "estimate"}}).resolve()
    assert config.eval.return_bounds == "estimate"
    assert from_dict(to_dict(config)).eval.return_bounds == "estimate"
    listed = from_dict({"eval": {"return_bounds": [0, 200]}})
    assert listed.eval.return_bounds == [0.0, 200.0]
