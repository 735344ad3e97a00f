import dataclasses
import logging
import typing
import warnings

import numpy as np

from . import checkpoint as ckpt
from .config import RngStreams
from .dynamics import EnvInstance
from .errors import CheckpointError, ConfigurationError, Error
from .population import EnvPopulation
from .ppo import PPOLearner, ppo_update
from .rollouts import collect_rollouts, constant_tail_input

logger = logging.getLogger(__name__)

DR = "dr"
UP = "up"
MIDPOINT = "midpoint"
ORACLE = "oracle"


@dataclasses.dataclass(frozen=True)
class BaselineKind:
    """Input layout of a baseline policy.

    Domain randomization sees the state only; the universal policy also sees
    the environment's ``mu`` and ``nu``. Neither ever receives an error input.
    """
    kind: str

    def __post_init__(self):
        if self.kind not in (DR, UP):
            raise ConfigurationError(
                f"BaselineKind: kind must be {DR!r} or {UP!r}, got {self.kind!r}")

    def input_dim(self, descriptor):
        if self.kind == DR:
            return descriptor.state_dim
        return descriptor.state_dim + descriptor.mu_dim + descriptor.nu_dim

    def train_input(self, params):
        """Training-time input rule: the true parameters of the active
        environment."""
        if self.kind == DR:
            return constant_tail_input()
        return constant_tail_input(params.mu, params.nu)


def baseline_test_input(kind, descriptor, mu, nu_true=None, mode=MIDPOINT):
    """Tail appended to the state at evaluation time.

    Domain randomization gets an empty tail. The universal policy gets the
    true ``mu`` and, for ``nu``, the train-range midpoint (default) or, in the
    ``oracle`` diagnostic mode, the true ``nu``.
    """
    kind = kind if isinstance(kind, BaselineKind) else BaselineKind(kind)
    if kind.kind == DR:
        return np.zeros(0)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if mode == MIDPOINT:
        nu = descriptor.midpoint_nu()
    elif mode == ORACLE:
        if nu_true is None:
            raise ConfigurationError(
                "baseline_test_input: oracle mode needs the true nu")
        nu = np.asarray(nu_true, dtype=np.float64).reshape(-1)
    else:
        raise ConfigurationError(
            f"baseline_test_input: mode must be {MIDPOINT!r} or {ORACLE!r}, got {mode!r}"
        )
    return np.concatenate([mu, nu])


@dataclasses.dataclass(eq=False)
class BaselineState:
    kind: BaselineKind
    population: EnvPopulation
    learner: PPOLearner
    streams: RngStreams
    budget: int
    iteration: int = 0
    policy_samples: int = 0
    failed_iterations: int = 0
    training_pool: typing.Tuple[int, ...] = ()

    @property
    def descriptor(self):
        return self.population.descriptor

    @property
    def policy(self):
        return self.learner.policy

    @property
    def total_samples(self):
        return self.policy_samples


def build_baseline_state(kind, population, ppo_config, budget, seed,
                         hidden_sizes=(32, 16), log_std=-0.5):
    kind = kind if isinstance(kind, BaselineKind) else BaselineKind(kind)
    if int(budget) < 1:
        raise ConfigurationError(f"baseline budget must be >= 1, got {budget}")
    streams = RngStreams(seed)
    learner = PPOLearner.build(kind.input_dim(population.descriptor),
                               hidden_sizes,
                               population.descriptor.action_dim,
                               ppo_config,
                               streams["init"],
                               log_std=log_std)
    return BaselineState(kind=kind,
                         population=population,
                         learner=learner,
                         streams=streams,
                         budget=int(budget),
                         training_pool=tuple(population.training))


def train_baseline(kind,
                   population,
                   ppo_config,
                   budget,
                   seed=0,
                   hidden_sizes=(32, 16),
                   log_std=-0.5,
                   state=None,
                   metrics=None,
                   checkpoint_fn=None,
                   checkpoint_every=0):
    """Train a domain-randomization or universal policy within ``budget``
    environment steps.

    Each update samples a training-pool environment uniformly, collects
    ``rollout_steps_per_update`` steps (fewer for the last batch so the budget
    is never exceeded) and runs one PPO update. A batch smaller than one
    minibatch is not collected.

    Parameters
    ----------
    kind : str or :class:`BaselineKind`
    population : :class:`~simtransfer.eap.population.EnvPopulation`
    ppo_config : :class:`~simtransfer.eap.ppo.PPOConfig`
    budget : int
        Total environment steps, usually matched to an error-aware run.
    seed : int
        Master seed for the named random streams.
    state : :class:`BaselineState`, optional
        Resume from this state instead of building a fresh one.

    Returns
    -------
    state : :class:`BaselineState`
    """
    if state is None:
        state = build_baseline_state(kind, population, ppo_config, budget, seed,
                                     hidden_sizes, log_std)
    streams = state.streams
    while True:
        n = min(int(ppo_config.rollout_steps_per_update),
                state.budget - state.policy_samples)
        if n < int(ppo_config.minibatch_size):
            break
        state.iteration += 1
        pick = int(streams["sampler"].integers(len(state.training_pool)))
        env_index = state.training_pool[pick]
        params = state.population.entries[env_index]
        env = EnvInstance(state.descriptor, params, rng=streams["env"])
        # a failed batch still spends its budget
        state.policy_samples += n
        try:
            buffer = collect_rollouts(state.policy, env, n,
                                      state.kind.train_input(params),
                                      streams["policy"])
            stats = ppo_update(state.learner, buffer, ppo_config,
                               streams["minibatch"])
        except Error as exc:
            state.failed_iterations += 1
            logger.warning("%s update %d aborted: %s: %s", state.kind.kind,
                           state.iteration, type(exc).__name__, exc)
            if metrics is not None:
                metrics.append(phase=state.kind.kind,
                               iteration=state.iteration,
                               update=state.learner.n_updates,
                               env_index=env_index,
                               policy_samples=state.policy_samples,
                               total_samples=state.total_samples,
                               status=f"failed: {type(exc).__name__}")
            continue
        if metrics is not None:
            metrics.append(phase=state.kind.kind,
                           iteration=state.iteration,
                           update=state.learner.n_updates,
                           env_index=env_index,
                           pretrain_samples=0,
                           policy_samples=state.policy_samples,
                           error_samples=0,
                           total_samples=state.total_samples,
                           mean_return=buffer.mean_return,
                           surrogate_loss=stats.surrogate_loss,
                           value_loss=stats.value_loss,
                           entropy=stats.entropy,
                           approx_kl=stats.approx_kl,
                           clip_fraction=stats.clip_fraction,
                           epochs_run=stats.epochs_run)
        logger.info("%s update %d env %d: mean return %.2f, %d/%d samples",
                    state.kind.kind, state.iteration, env_index,
                    buffer.mean_return, state.policy_samples, state.budget)
        if checkpoint_fn is not None and checkpoint_every and state.iteration % int(
                checkpoint_every) == 0:
            checkpoint_fn(state)
    return state


def warn_oracle(mode):
    if mode == ORACLE:
        warnings.warn(
            "universal policy evaluated with the true nu (oracle mode); these numbers are a diagnostic upper bound, not zero-shot results",
            UserWarning)


def save_state(state, path):
    payload = {
        "method": state.kind.kind,
        "iteration": state.iteration,
        "policy_samples": state.policy_samples,
        "failed_iterations": state.failed_iterations,
        "budget": state.budget,
        "population_hash": state.population.hash,
        "learner": ckpt.learner_payload(state.learner),
        "rng": state.streams.state_dict(),
    }
    return ckpt.save_checkpoint(path, ckpt.learner_tensors("learner",
                                                           state.learner),
                                payload)


def load_state(state, path):
    tensors, payload = ckpt.load_checkpoint(path)
    if payload.get("method") != state.kind.kind:
        raise CheckpointError(
            f"load_state: checkpoint holds a {payload.get('method')!r} run, expected {state.kind.kind!r}"
        )
    if payload["population_hash"] != state.population.hash:
        raise CheckpointError(
            "load_state: checkpoint was written for a different population")
    ckpt.restore_learner("learner", state.learner, tensors, payload["learner"])
    state.iteration = int(payload["iteration"])
    state.policy_samples = int(payload["policy_samples"])
    state.failed_iterations = int(payload["failed_iterations"])
    state.streams.load_state_dict(payload["rng"])
    return state
