import copy
import dataclasses
import logging
import typing

import dask
import numpy as np

from . import checkpoint as ckpt
from .config import RngStreams
from .dynamics import EnvDescriptor, DynamicsParams, EnvInstance
from .error_prediction import (PROJECTED, ErrorDataset, ErrorFnConfig,
                               ErrorPredictor, ErrorSample, collect_error_data,
                               train_error_fn)
from .errors import CheckpointError, ConfigurationError, ContractError, Error
from .parallel import compute
from .population import EnvPopulation
from .ppo import PPOLearner, ppo_update
from .rollouts import collect_rollouts, constant_tail_input

logger = logging.getLogger(__name__)

# reset states used to seed paired rollouts before any policy rollout exists
_FALLBACK_POOL_SIZE = 64


def error_dim_for(descriptor, error_config):
    """Length of the error slice of the policy input."""
    if error_config.representation == PROJECTED:
        return int(error_config.latent_dim or descriptor.error_latent_dim)
    return descriptor.state_dim


class ErrorAwareInput:
    """Builds the policy input ``(s, mu, e)`` for one environment.

    Each call first queries the uncorrected action with a zero error, then the
    predictor, and returns the input for the corrected action. The uncorrected
    action is sampled from its own stream (or taken as the mean), so a
    predictor that always returns zero leaves the policy-sampling stream
    exactly as a plain ``(s, mu, 0)`` rollout would.
    """

    def __init__(self,
                 policy,
                 predictor,
                 descriptor,
                 mu,
                 error_dim,
                 rng=None,
                 mode="sample"):
        if mode not in ("sample", "mean"):
            raise ConfigurationError(f"ErrorAwareInput: unknown mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ContractError("ErrorAwareInput: sample mode needs an rng")
        self.policy = policy
        self.predictor = predictor
        self.descriptor = descriptor
        self.mu = np.asarray(mu, dtype=np.float64)
        self.zero = np.zeros(int(error_dim))
        self.rng = rng
        self.mode = mode
        self.faults = 0

    def __call__(self, state):
        base = np.concatenate([state, self.mu, self.zero])
        if self.mode == "mean":
            action = self.policy.mean(base)
        else:
            action, _ = self.policy.sample(base, self.rng)
        action = np.clip(action, self.descriptor.action_low,
                         self.descriptor.action_high)
        e = self.predictor.predict(state, action, self.mu)
        if not np.all(np.isfinite(e)):
            self.faults += 1
            logger.warning("non-finite predicted error at state %s; using zero",
                           np.asarray(state).tolist())
            e = self.zero
        return np.concatenate([state, self.mu, e])


@dataclasses.dataclass(eq=False)
class EAPState:
    """Everything an error-aware training run carries between iterations.

    ``training_pool`` and ``validation_pool`` are population indices; when the
    reference is a population entry it appears in neither.
    """
    descriptor: EnvDescriptor
    population: EnvPopulation
    learner: PPOLearner
    predictor: ErrorPredictor
    dataset: ErrorDataset
    error_config: ErrorFnConfig
    streams: RngStreams
    reference: DynamicsParams
    reference_index: typing.Optional[int]
    training_pool: typing.Tuple[int, ...]
    validation_pool: typing.Tuple[int, ...]
    uncorrected_action: str = "sample"
    policy_iterations_per_env: int = 1
    iteration: int = 0
    pretrain_samples: int = 0
    policy_samples: int = 0
    error_samples: int = 0
    faults: int = 0
    failed_iterations: int = 0
    pretrain_status: str = "pending"
    state_pool: typing.Optional[np.ndarray] = None

    @property
    def policy(self):
        return self.learner.policy

    @property
    def error_dim(self):
        return self.predictor.error_dim

    @property
    def input_dim(self):
        return self.descriptor.state_dim + self.descriptor.mu_dim + self.error_dim

    @property
    def total_samples(self):
        return self.pretrain_samples + self.policy_samples + self.error_samples

    def counters(self):
        return {
            "pretrain_samples": self.pretrain_samples,
            "policy_samples": self.policy_samples,
            "error_samples": self.error_samples,
            "total_samples": self.total_samples,
        }


def build_eap_state(config, population):
    """Fresh networks, an empty error dataset and the sampling pools.

    Parameters
    ----------
    config : :class:`~simtransfer.eap.config.ExperimentConfig`
    population : :class:`~simtransfer.eap.population.EnvPopulation`
    """
    descriptor = population.descriptor
    streams = RngStreams(config.run.seed)
    reference_index = config.eap.reference_index
    training = tuple(population.training)
    validation = tuple(population.validation)
    if reference_index is None:
        reference = descriptor.reference_params
    else:
        reference_index = int(reference_index)
        if reference_index not in training + validation:
            raise ConfigurationError(
                f"eap.reference_index {reference_index} is not a training or validation entry"
            )
        reference = population.entries[reference_index]
        training = tuple(i for i in training if i != reference_index)
        validation = tuple(i for i in validation if i != reference_index)
    if not training or not validation:
        raise ConfigurationError(
            "eap: the training and validation pools must each keep at least one environment besides the reference"
        )

    error_dim = error_dim_for(descriptor, config.error_fn)
    init = streams["init"]
    learner = PPOLearner.build(
        descriptor.state_dim + descriptor.mu_dim + error_dim,
        config.net.hidden_sizes,
        descriptor.action_dim,
        config.ppo,
        init,
        log_std=config.net.log_std_init)
    predictor = ErrorPredictor(config.error_fn.representation,
                               descriptor.state_dim,
                               descriptor.action_dim,
                               descriptor.mu_dim,
                               config.net.hidden_sizes,
                               config.error_fn.horizon,
                               init,
                               latent_dim=error_dim
                               if config.error_fn.representation == PROJECTED
                               else None,
                               lr=config.error_fn.lr)
    if config.eap.freeze_predictor:
        predictor.freeze_at_zero()
    return EAPState(descriptor=descriptor,
                    population=population,
                    learner=learner,
                    predictor=predictor,
                    dataset=ErrorDataset(config.error_fn.capacity),
                    error_config=config.error_fn,
                    streams=streams,
                    reference=reference,
                    reference_index=reference_index,
                    training_pool=training,
                    validation_pool=validation,
                    uncorrected_action=config.eap.uncorrected_action,
                    policy_iterations_per_env=int(
                        config.eap.policy_iterations_per_env))


def reference_input(state):
    """Pretraining input rule: ``mu`` pinned to the reference and a zero
    error."""
    return constant_tail_input(state.reference.mu, np.zeros(state.error_dim))


def pretrain_reference(state, ppo_config, budget, threshold, metrics=None):
    """Train the policy with plain PPO on the reference environment only.

    Stops as soon as a batch's mean episode return reaches ``threshold`` or the
    step ``budget`` is spent. Falling short is logged and recorded in
    ``state.pretrain_status`` but does not stop the run.
    """
    env = EnvInstance(state.descriptor, state.reference, rng=state.streams["env"])
    input_fn = reference_input(state)
    reached = False
    n_batches = 0
    while True:
        n = min(int(ppo_config.rollout_steps_per_update),
                int(budget) - state.pretrain_samples)
        if n < int(ppo_config.minibatch_size):
            break
        buffer = collect_rollouts(state.policy, env, n, input_fn,
                                  state.streams["policy"])
        state.pretrain_samples += n
        stats = ppo_update(state.learner, buffer, ppo_config,
                           state.streams["minibatch"])
        state.state_pool = buffer.states()
        n_batches += 1
        mean_return = buffer.mean_return
        if metrics is not None:
            metrics.append(phase="pretrain",
                           iteration=0,
                           update=state.learner.n_updates,
                           env_index=-1
                           if state.reference_index is None else state.reference_index,
                           mean_return=mean_return,
                           **state.counters(),
                           **_stats_row(stats))
        logger.debug("pretrain batch %d: mean return %.2f after %d steps",
                     n_batches, mean_return, state.pretrain_samples)
        if mean_return >= threshold:
            reached = True
            break
    if reached:
        state.pretrain_status = "reached"
        logger.info("pretraining reached mean return %.2f >= %.2f in %d steps",
                    mean_return, threshold, state.pretrain_samples)
    elif n_batches == 0:
        state.pretrain_status = "skipped"
        logger.info("pretraining skipped: budget %d is below one minibatch",
                    budget)
    else:
        state.pretrain_status = "below_threshold"
        logger.warning(
            "pretraining budget of %d steps exhausted at mean return %.2f, below threshold %.2f; continuing",
            budget, mean_return, threshold)
    return state


def error_aware_input(state, mu, rng=None, mode=None):
    return ErrorAwareInput(state.policy,
                           state.predictor,
                           state.descriptor,
                           mu,
                           state.error_dim,
                           rng=state.streams["uncorrected"] if rng is None else rng,
                           mode=state.uncorrected_action if mode is None else mode)


def generate_rollouts(state, env_params, n_steps):
    """Error-aware rollouts in the environment ``env_params``.

    Every step queries the uncorrected action, predicts its error, and executes
    the action drawn for input ``(s, mu, e)``. The stored log density belongs
    to that executed action under that exact input.
    """
    env = EnvInstance(state.descriptor, env_params, rng=state.streams["env"])
    input_fn = error_aware_input(state, env_params.mu)
    buffer = collect_rollouts(state.policy, env, n_steps, input_fn,
                              state.streams["policy"])
    state.policy_samples += int(n_steps)
    state.faults += input_fn.faults
    return buffer


def _initial_state_pool(state):
    if state.state_pool is not None and len(state.state_pool):
        return state.state_pool
    env = EnvInstance(state.descriptor,
                      state.reference,
                      rng=state.streams["error_fn"])
    return np.array([env.reset() for _ in range(_FALLBACK_POOL_SIZE)])


def _paired_task(policy, descriptor, reference, params, pool, horizon, count,
                 seed, error_dim, source):
    return collect_error_data(policy, descriptor, reference, params, pool,
                              horizon, count, np.random.default_rng(seed),
                              error_dim, source)


def refresh_error_fn(state, n_workers=1):
    """Collect paired rollouts against the reference and retrain the
    predictor.

    ``samples_per_refresh`` starts are split evenly over the validation pool;
    each environment's collection runs as its own task with its own seed and a
    snapshot of the policy. The merged samples are appended in pool order.

    Returns
    -------
    loss : float
        Final normalized training loss (``nan`` while the dataset is smaller
        than a minibatch).
    added, skipped : int
    """
    cfg = state.error_config
    pool = _initial_state_pool(state)
    counts = [
        len(chunk) for chunk in np.array_split(
            np.arange(int(cfg.samples_per_refresh)), len(state.validation_pool))
    ]
    seeds = state.streams["error_fn"].integers(0,
                                               2**63 - 1,
                                               size=len(counts))
    tasks = []
    for index, count, seed in zip(state.validation_pool, counts, seeds):
        if count == 0:
            continue
        tasks.append(
            dask.delayed(_paired_task)(copy.deepcopy(state.policy),
                                       state.descriptor, state.reference,
                                       state.population.entries[index], pool,
                                       int(cfg.horizon), count, int(seed),
                                       state.error_dim, index))
    samples, skipped = [], 0
    for task_samples, task_skipped in compute(tasks, n_workers):
        samples.extend(task_samples)
        skipped += task_skipped
    state.dataset.add(samples)
    state.error_samples += 2 * int(cfg.horizon) * len(samples)
    if len(state.dataset) < int(cfg.minibatch_size):
        logger.debug("error dataset holds %d samples; training deferred",
                     len(state.dataset))
        return float("nan"), len(samples), skipped
    loss = train_error_fn(state.predictor, state.dataset, cfg,
                          state.streams["error_fn"])
    return loss, len(samples), skipped


def _stats_row(stats):
    return {
        "surrogate_loss": stats.surrogate_loss,
        "value_loss": stats.value_loss,
        "entropy": stats.entropy,
        "approx_kl": stats.approx_kl,
        "clip_fraction": stats.clip_fraction,
        "epochs_run": stats.epochs_run,
    }


def train_eap(state,
              total_iterations,
              ppo_config,
              metrics=None,
              checkpoint_fn=None,
              checkpoint_every=0,
              n_workers=1):
    """Outer error-aware training loop.

    Each iteration samples one training-pool environment uniformly, then runs
    ``policy_iterations_per_env`` rounds of error-function refresh, error-aware
    rollouts and a PPO update. A failure inside a round is logged and ends
    that iteration; the run continues with the next one.

    Parameters
    ----------
    state : :class:`EAPState`
        Pretrained state, updated in place.
    total_iterations : int
    ppo_config : :class:`~simtransfer.eap.ppo.PPOConfig`
    metrics : :class:`~simtransfer.eap.metrics.MetricsWriter`, optional
    checkpoint_fn : callable, optional
        Called with ``state`` after every ``checkpoint_every``-th iteration.
    checkpoint_every : int
    n_workers : int

    Returns
    -------
    state : :class:`EAPState`
    """
    for _ in range(int(total_iterations)):
        state.iteration += 1
        pick = int(state.streams["sampler"].integers(len(state.training_pool)))
        env_index = state.training_pool[pick]
        params = state.population.entries[env_index]
        for _ in range(state.policy_iterations_per_env):
            faults = state.faults
            try:
                loss, added, skipped = refresh_error_fn(state, n_workers)
                buffer = generate_rollouts(state, params,
                                           ppo_config.rollout_steps_per_update)
                stats = ppo_update(state.learner, buffer, ppo_config,
                                   state.streams["minibatch"])
            except Error as exc:
                state.failed_iterations += 1
                logger.warning("iteration %d aborted: %s: %s", state.iteration,
                               type(exc).__name__, exc)
                if metrics is not None:
                    metrics.append(phase="eap",
                                   iteration=state.iteration,
                                   update=state.learner.n_updates,
                                   env_index=env_index,
                                   faults=state.faults - faults,
                                   status=f"failed: {type(exc).__name__}",
                                   **state.counters())
                break
            state.state_pool = buffer.states()
            if metrics is not None:
                metrics.append(phase="eap",
                               iteration=state.iteration,
                               update=state.learner.n_updates,
                               env_index=env_index,
                               mean_return=buffer.mean_return,
                               error_loss=loss,
                               error_samples_added=added,
                               error_skipped=skipped,
                               faults=state.faults - faults,
                               **state.counters(),
                               **_stats_row(stats))
            logger.info(
                "iteration %d env %d: mean return %.2f, error loss %.4g, %d total samples",
                state.iteration, env_index, buffer.mean_return, loss,
                state.total_samples)
        if checkpoint_fn is not None and checkpoint_every and state.iteration % int(
                checkpoint_every) == 0:
            checkpoint_fn(state)
    return state


def _dataset_tensors(state):
    d = state.descriptor
    widths = {
        "s0": d.state_dim,
        "a0": d.action_dim,
        "sT_val": d.state_dim,
        "sT_ref": d.state_dim,
        "mu": d.mu_dim,
    }
    samples = list(state.dataset.samples)
    tensors = {}
    for field, width in widths.items():
        tensors[f"dataset.{field}"] = np.array(
            [getattr(z, field) for z in samples],
            dtype=np.float64).reshape(len(samples), width)
    tensors["dataset.source"] = np.array([z.source for z in samples],
                                         dtype=np.float64)
    return tensors


def state_tensors(state):
    """Named arrays of an :class:`EAPState` for :func:`save_checkpoint`."""
    predictor = state.predictor
    tensors = ckpt.learner_tensors("learner", state.learner)
    tensors.update({
        f"predictor.net.{k}": v for k, v in predictor.net.parameters().items()
    })
    tensors.update(ckpt.adam_tensors("predictor.opt", predictor.opt))
    for name, norm in (("input_norm", predictor.input_normalizer),
                       ("target_norm", predictor.target_normalizer)):
        tensors[f"predictor.{name}.mean"] = norm.mean
        tensors[f"predictor.{name}.m2"] = norm.m2
    tensors.update(_dataset_tensors(state))
    if state.state_pool is not None:
        tensors["state_pool"] = state.state_pool
    return tensors


def state_payload(state):
    predictor = state.predictor
    return {
        "method": "eap",
        "iteration": state.iteration,
        "pretrain_samples": state.pretrain_samples,
        "policy_samples": state.policy_samples,
        "error_samples": state.error_samples,
        "faults": state.faults,
        "failed_iterations": state.failed_iterations,
        "pretrain_status": state.pretrain_status,
        "population_hash": state.population.hash,
        "reference_index": state.reference_index,
        "learner": ckpt.learner_payload(state.learner),
        "predictor": {
            "variant": predictor.variant,
            "frozen": predictor.frozen,
            "n_updates": predictor.n_updates,
            "n_observed": predictor.n_observed,
            "opt": ckpt.adam_payload(predictor.opt),
            "input_norm_count": predictor.input_normalizer.count,
            "target_norm_count": predictor.target_normalizer.count,
        },
        "dataset_total_added": state.dataset.total_added,
        "rng": state.streams.state_dict(),
    }


def save_state(state, path):
    return ckpt.save_checkpoint(path, state_tensors(state), state_payload(state))


def restore_state(state, tensors, payload):
    """Load a checkpoint into a state built from the same config and
    population."""
    if payload.get("method") != "eap":
        raise CheckpointError(
            f"restore_state: checkpoint holds a {payload.get('method')!r} run")
    if payload["population_hash"] != state.population.hash:
        raise CheckpointError(
            "restore_state: checkpoint was written for a different population")
    predictor = state.predictor
    if payload["predictor"]["variant"] != predictor.variant:
        raise CheckpointError(
            "restore_state: checkpoint predictor variant differs from config")
    ckpt.restore_learner("learner", state.learner, tensors, payload["learner"])
    names = list(predictor.net.parameters())
    try:
        predictor.net.set_parameters(
            {k: tensors[f"predictor.net.{k}"] for k in names})
    except KeyError as exc:
        raise CheckpointError(f"restore_state: missing tensor {exc}") from None
    p = payload["predictor"]
    predictor.opt = ckpt.restore_adam("predictor.opt", tensors, p["opt"], names)
    predictor.frozen = bool(p["frozen"])
    predictor.n_updates = int(p["n_updates"])
    predictor.n_observed = int(p["n_observed"])
    for name, norm in (("input_norm", predictor.input_normalizer),
                       ("target_norm", predictor.target_normalizer)):
        norm.load_state_dict({
            "count": p[f"{name}_count"],
            "mean": tensors[f"predictor.{name}.mean"],
            "m2": tensors[f"predictor.{name}.m2"],
        })

    state.dataset.samples.clear()
    sources = tensors["dataset.source"]
    for i in range(len(sources)):
        state.dataset.samples.append(
            ErrorSample(s0=tensors["dataset.s0"][i],
                        a0=tensors["dataset.a0"][i],
                        sT_val=tensors["dataset.sT_val"][i],
                        sT_ref=tensors["dataset.sT_ref"][i],
                        mu=tensors["dataset.mu"][i],
                        source=int(sources[i])))
    state.dataset.total_added = int(payload["dataset_total_added"])
    state.state_pool = tensors.get("state_pool")

    for name in ("iteration", "pretrain_samples", "policy_samples",
                 "error_samples", "faults", "failed_iterations"):
        setattr(state, name, int(payload[name]))
    state.pretrain_status = payload["pretrain_status"]
    state.streams.load_state_dict(payload["rng"])
    return state


def load_state(state, path):
    tensors, payload = ckpt.load_checkpoint(path)
    return restore_state(state, tensors, payload)
