import dataclasses
import hashlib
import logging
import os
import typing
import warnings

import numpy as np
import yaml

from .dynamics import PerturbationSpec, get_descriptor, override_descriptor, remap_split
from .error_prediction import PROJECTED, ErrorFnConfig
from .errors import ConfigurationError
from .ppo import PPOConfig

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "SIMTRANSFER_OUTPUT_ROOT"
METHODS = ("eap", "dr", "up")

# pretraining cutoffs on the reference environment
PRETRAIN_THRESHOLDS = {"cartpole": 450.0, "pendulum": -300.0, "hopper": 300.0}
# (worst, best) episode returns used for normalization
RETURN_BOUNDS = {
    "cartpole": (0.0, 500.0),
    "pendulum": (-1600.0, -150.0),
    "hopper": (0.0, 400.0),
}
ESTIMATE_BOUNDS = "estimate"
_ENTROPY_DEFAULTS = {"cartpole": 0.0, "pendulum": 0.005, "hopper": 0.0}

_ALIASES = {
    "seed": "run.seed",
    "method": "run.method",
    "task": "env.task",
    "error_fn.T": "error_fn.horizon",
}


@dataclasses.dataclass
class EnvConfig:
    task: str = "cartpole"
    observable: typing.Optional[typing.List[str]] = None
    k_train: int = 10
    k_val: int = 4
    k_heldout: int = 5
    heldout_vary: str = "both"
    dt: typing.Optional[float] = None
    max_steps: typing.Optional[int] = None
    train_ranges: typing.Dict[str, typing.List[float]] = dataclasses.field(
        default_factory=dict)
    test_ranges: typing.Dict[str, typing.List[float]] = dataclasses.field(
        default_factory=dict)
    perturbation_magnitude: typing.Optional[typing.List[float]] = None
    perturbation_duration: int = 1
    population_file: typing.Optional[str] = None

    def __post_init__(self):
        if self.heldout_vary not in ("both", "mu", "nu"):
            raise ConfigurationError(
                f"env.heldout_vary must be one of both, mu, nu; got {self.heldout_vary!r}"
            )
        for name in ("k_train", "k_val", "k_heldout"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"env.{name} must be >= 1")
        for name, ranges in (("train_ranges", self.train_ranges),
                             ("test_ranges", self.test_ranges)):
            for key, interval in ranges.items():
                if len(interval) != 2:
                    raise ConfigurationError(
                        f"env.{name}.{key} must be a [lo, hi] pair")
        if self.perturbation_magnitude is not None and len(
                self.perturbation_magnitude) != 2:
            raise ConfigurationError(
                "env.perturbation_magnitude must be a [lo, hi] pair or null")


@dataclasses.dataclass
class NetConfig:
    hidden_sizes: typing.List[int] = dataclasses.field(
        default_factory=lambda: [32, 16])
    log_std_init: float = -0.5

    def __post_init__(self):
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigurationError(
                f"net.hidden_sizes must be positive integers, got {self.hidden_sizes}"
            )


@dataclasses.dataclass
class EAPConfig:
    pretrain_budget: int = 300000
    pretrain_threshold: typing.Optional[float] = None
    iterations: int = 150
    policy_iterations_per_env: int = 1
    reference_index: typing.Optional[int] = None
    uncorrected_action: str = "sample"
    freeze_predictor: bool = False

    def __post_init__(self):
        if self.uncorrected_action not in ("sample", "mean"):
            raise ConfigurationError(
                f"eap.uncorrected_action must be sample or mean, got {self.uncorrected_action!r}"
            )
        if int(self.pretrain_budget) < 0 or int(self.iterations) < 0:
            raise ConfigurationError(
                "eap.pretrain_budget and eap.iterations must be >= 0")
        if int(self.policy_iterations_per_env) < 1:
            raise ConfigurationError("eap.policy_iterations_per_env must be >= 1")


@dataclasses.dataclass
class BaselineConfig:
    budget: typing.Optional[int] = None
    match_run: typing.Optional[str] = None
    up_nu_mode: str = "midpoint"

    def __post_init__(self):
        if self.up_nu_mode not in ("midpoint", "oracle"):
            raise ConfigurationError(
                f"baseline.up_nu_mode must be midpoint or oracle, got {self.up_nu_mode!r}"
            )
        if self.budget is not None and int(self.budget) < 1:
            raise ConfigurationError("baseline.budget must be >= 1 or null")


@dataclasses.dataclass
class EvalConfig:
    n_episodes: int = 20
    mode: str = "mean"
    seed: typing.Optional[int] = None
    # [worst, best], or "estimate" to measure the worst bound at evaluation
    return_bounds: typing.Optional[typing.Union[str, typing.List[float]]] = None

    def __post_init__(self):
        if self.mode not in ("mean", "sample"):
            raise ConfigurationError(
                f"eval.mode must be mean or sample, got {self.mode!r}")
        if int(self.n_episodes) < 1:
            raise ConfigurationError("eval.n_episodes must be >= 1")
        if isinstance(self.return_bounds, str):
            if self.return_bounds != ESTIMATE_BOUNDS:
                raise ConfigurationError(
                    f"eval.return_bounds must be [worst, best] or {ESTIMATE_BOUNDS!r}, got {self.return_bounds!r}"
                )
        elif self.return_bounds is not None and (
                len(self.return_bounds) != 2 or
                not self.return_bounds[0] < self.return_bounds[1]):
            raise ConfigurationError(
                "eval.return_bounds must be [worst, best] with worst < best")


@dataclasses.dataclass
class RunConfig:
    method: str = "eap"
    seed: int = 0
    output_dir: typing.Optional[str] = None
    name: typing.Optional[str] = None
    n_workers: int = 1
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"run.method must be one of {list(METHODS)}, got {self.method!r}")
        if int(self.n_workers) < 1:
            raise ConfigurationError("run.n_workers must be >= 1")
        if int(self.checkpoint_every) < 0:
            raise ConfigurationError("run.checkpoint_every must be >= 0")


@dataclasses.dataclass
class ExperimentConfig:
    """Every knob of one run, grouped by section.

    :meth:`resolve` replaces the ``None`` placeholders with the values that
    will actually be used, so the resolved config written to a run directory
    is complete.
    """
    env: EnvConfig = dataclasses.field(default_factory=EnvConfig)
    net: NetConfig = dataclasses.field(default_factory=NetConfig)
    ppo: PPOConfig = dataclasses.field(default_factory=PPOConfig)
    error_fn: ErrorFnConfig = dataclasses.field(default_factory=ErrorFnConfig)
    eap: EAPConfig = dataclasses.field(default_factory=EAPConfig)
    baseline: BaselineConfig = dataclasses.field(default_factory=BaselineConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)
    version: int = CONFIG_VERSION

    def descriptor(self):
        """The task descriptor with this config's overrides and split."""
        descriptor = get_descriptor(self.env.task)
        perturbation = None
        if self.env.perturbation_magnitude is not None:
            perturbation = PerturbationSpec(
                tuple(self.env.perturbation_magnitude),
                duration_steps=int(self.env.perturbation_duration))
        try:
            descriptor = override_descriptor(descriptor,
                                             dt=self.env.dt,
                                             max_steps=self.env.max_steps,
                                             train_ranges=self.env.train_ranges,
                                             test_ranges=self.env.test_ranges,
                                             perturbation=perturbation)
        except ValueError as exc:
            raise ConfigurationError(f"env: {exc}") from None
        if self.env.observable is not None:
            descriptor = remap_split(descriptor, self.env.observable)
        return descriptor

    def error_dim(self):
        if self.error_fn.representation == PROJECTED:
            return int(self.error_fn.latent_dim or
                       self.descriptor().error_latent_dim)
        return self.descriptor().state_dim

    def estimated_eap_budget(self):
        """Upper bound on EAP's environment steps: full pretraining budget plus
        every iteration's rollouts and paired error rollouts."""
        per_iteration = (self.ppo.rollout_steps_per_update +
                         2 * self.error_fn.horizon *
                         self.error_fn.samples_per_refresh)
        return int(self.eap.pretrain_budget + self.eap.iterations *
                   self.eap.policy_iterations_per_env * per_iteration)

    def resolve(self):
        """Return a copy with every default made explicit."""
        data = to_dict(self)
        descriptor = self.descriptor()
        task = descriptor.name
        if data["env"]["observable"] is None:
            data["env"]["observable"] = descriptor.observable_names
        if data["env"]["dt"] is None:
            data["env"]["dt"] = descriptor.dt
        if data["env"]["max_steps"] is None:
            data["env"]["max_steps"] = descriptor.max_steps
        if data["eap"]["pretrain_threshold"] is None:
            data["eap"]["pretrain_threshold"] = PRETRAIN_THRESHOLDS[task]
        if data["error_fn"]["latent_dim"] is None:
            data["error_fn"]["latent_dim"] = descriptor.error_latent_dim
        if data["eval"]["return_bounds"] is None:
            data["eval"]["return_bounds"] = list(RETURN_BOUNDS[task])
        if data["eval"]["seed"] is None:
            data["eval"]["seed"] = self.run.seed
        if data["baseline"]["budget"] is None:
            if self.baseline.match_run:
                from .metrics import final_total_samples
                data["baseline"]["budget"] = final_total_samples(
                    os.path.join(self.baseline.match_run, "metrics.csv"))
            else:
                data["baseline"]["budget"] = self.estimated_eap_budget()
                if self.run.method != "eap":
                    warnings.warn(
                        f"{self.run.method}: baseline.budget falls back to the "
                        f"estimated EAP budget {data['baseline']['budget']}; set "
                        f"baseline.match_run to an EAP run for a matched budget")
        if data["run"]["output_dir"] is None:
            data["run"]["output_dir"] = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return from_dict(data)


_SECTIONS = {
    "env": EnvConfig,
    "net": NetConfig,
    "ppo": PPOConfig,
    "error_fn": ErrorFnConfig,
    "eap": EAPConfig,
    "baseline": BaselineConfig,
    "eval": EvalConfig,
    "run": RunConfig,
}


def default_config(task="cartpole", method="eap"):
    config = ExperimentConfig()
    config.env.task = task
    config.run.method = method
    config.ppo.entropy_coef = _ENTROPY_DEFAULTS.get(task, 0.0)
    return config


def _coerce(value, annotation, path):
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        for candidate in inner[:-1]:
            try:
                return _coerce(value, candidate, path)
            except ConfigurationError:
                pass
        return _coerce(value, inner[-1], path)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a mapping, got {value!r}")
        return {
            str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()
        }
    if annotation is bool:
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or (
                isinstance(value, float) and not value.is_integer()):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(
            f"{path}: unknown key(s) {unknown}; valid keys are {sorted(names)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def from_dict(data):
    """Build a validated :class:`ExperimentConfig` from nested mappings."""
    data = dict(data or {})
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(
            f"version: unsupported config version {version}, expected {CONFIG_VERSION}"
        )
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigurationError(
            f"unknown section(s) {unknown}; valid sections are {sorted(_SECTIONS)}"
        )
    sections = {
        name: _build_section(cls, data.get(name), name)
        for name, cls in _SECTIONS.items()
    }
    return ExperimentConfig(**sections)


def to_dict(config):
    data = dataclasses.asdict(config)
    version = data.pop("version")
    return {"version": version, **data}


def load_config(path, overrides=()):
    """Read a YAML config file and apply ``key.path=value`` overrides."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    return from_dict(apply_overrides(data, overrides))


def dump_config(config, path):
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(config), f, sort_keys=False)
    return path


def apply_overrides(data, overrides):
    """Set dotted paths in a nested mapping.

    Values are parsed as YAML scalars, so ``5`` becomes an int and
    ``[32, 16]`` a list.
    """
    data = yaml.safe_load(yaml.safe_dump(data)) or {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(
                f"override {item!r} must have the form key.path=value")
        key, raw = item.split("=", 1)
        key = _ALIASES.get(key.strip(), key.strip())
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigurationError(
                f"override {item!r}: unknown key {key!r}; use section.field with sections {sorted(_SECTIONS)}"
            )
        section, field = parts
        valid = {f.name for f in dataclasses.fields(_SECTIONS[section])}
        if field not in valid:
            raise ConfigurationError(
                f"override {item!r}: {section} has no field {field!r}; valid fields are {sorted(valid)}"
            )
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"override {item!r}: {exc}") from None
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section][field] = value
    return data


def _stream_key(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4],
                          "big")


class RngStreams:
    """Named, independent random streams derived from one master seed.

    Each name maps to its own ``SeedSequence`` child, so adding draws to one
    consumer leaves every other stream untouched.
    """

    def __init__(self, master_seed):
        self.master_seed = int(master_seed)
        self._streams = {}

    def _sequence(self, name):
        return np.random.SeedSequence(self.master_seed,
                                      spawn_key=(_stream_key(name),))

    def __getitem__(self, name):
        if name not in self._streams:
            self._streams[name] = np.random.Generator(
                np.random.PCG64(self._sequence(name)))
        return self._streams[name]

    def seed_for(self, name):
        """A plain integer seed for consumers that record their seed."""
        return int(self._sequence(name).generate_state(1, np.uint32)[0])

    def state_dict(self):
        return {
            name: gen.bit_generator.state for name, gen in self._streams.items()
        }

    def load_state_dict(self, states):
        for name, state in states.items():
            self[name].bit_generator.state = state
