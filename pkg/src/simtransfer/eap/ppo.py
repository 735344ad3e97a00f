import dataclasses
import logging
import math
import typing

import numpy as np

from .errors import ConfigurationError, ContractError, NonFiniteError
from .networks import (AdamState, FeedforwardNet, GaussianPolicyHead,
                       clip_grad_norm, optimizer_step)

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class Transition:
    """One step of policy experience.

    ``aux_obs`` is the exact policy input used when ``a_hat`` was drawn, so the
    behavior log density can be recomputed for importance ratios.
    ``next_aux_obs`` is the critic input at ``s_next`` and is only needed when
    the step ends a segment without terminating (time limit or end of the
    collection).
    """
    s: np.ndarray
    a_hat: np.ndarray
    r: float
    s_next: np.ndarray
    mu: np.ndarray
    log_prob: float
    done: bool
    aux_obs: np.ndarray
    truncated: bool = False
    next_aux_obs: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        if not math.isfinite(self.log_prob):
            raise ContractError(f"Transition: log_prob must be finite, got {self.log_prob}")


class RolloutBuffer:
    """Append-only list of :class:`Transition` plus finished-episode returns."""

    def __init__(self):
        self.transitions = []
        self.episode_returns = []
        self.episode_lengths = []

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def append(self, transition):
        self.transitions.append(transition)

    def end_episode(self, episode_return, length):
        self.episode_returns.append(float(episode_return))
        self.episode_lengths.append(int(length))

    def merge(self, other):
        """Concatenate another worker's buffer after this one."""
        self.transitions.extend(other.transitions)
        self.episode_returns.extend(other.episode_returns)
        self.episode_lengths.extend(other.episode_lengths)
        return self

    def states(self):
        return np.array([t.s for t in self.transitions])

    def arrays(self):
        return (np.array([t.aux_obs for t in self.transitions]),
                np.array([t.a_hat for t in self.transitions]),
                np.array([t.log_prob for t in self.transitions]))

    def segments(self):
        """Split into time-ordered pieces ending at a terminal step, a time
        limit or the end of the buffer."""
        start = 0
        for i, t in enumerate(self.transitions):
            if t.done or t.truncated:
                yield self.transitions[start:i + 1]
                start = i + 1
        if start < len(self.transitions):
            yield self.transitions[start:]

    @property
    def mean_return(self):
        if not self.episode_returns:
            return float("nan")
        return float(np.mean(self.episode_returns))


@dataclasses.dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    epochs_per_update: int = 10
    minibatch_size: int = 64
    entropy_coef: float = 0.0
    max_grad_norm: typing.Optional[float] = 0.5
    rollout_steps_per_update: int = 4096
    target_kl: typing.Optional[float] = 0.05
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"ppo.gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError(
                f"ppo.gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if not self.clip_epsilon > 0.0:
            raise ConfigurationError(
                f"ppo.clip_epsilon must be positive, got {self.clip_epsilon}")
        for name in ("policy_lr", "value_lr"):
            if not getattr(self, name) > 0.0:
                raise ConfigurationError(f"ppo.{name} must be positive")
        for name in ("epochs_per_update", "minibatch_size",
                     "rollout_steps_per_update"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"ppo.{name} must be >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0.0:
            raise ConfigurationError("ppo.max_grad_norm must be positive or null")
        if self.target_kl is not None and not self.target_kl > 0.0:
            raise ConfigurationError("ppo.target_kl must be positive or null")


@dataclasses.dataclass
class PPOStats:
    surrogate_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    epochs_run: int
    grad_norm: float
    value_loss_history: typing.List[float] = dataclasses.field(
        default_factory=list)


@dataclasses.dataclass
class PPOLearner:
    """Policy, separate critic and their optimizer states."""
    policy: GaussianPolicyHead
    value_net: FeedforwardNet
    policy_opt: AdamState
    value_opt: AdamState
    n_updates: int = 0

    @classmethod
    def build(cls, obs_dim, hidden_sizes, action_dim, config, rng, log_std=-0.5):
        policy = GaussianPolicyHead.build(obs_dim, hidden_sizes, action_dim, rng,
                                          log_std)
        value_net = FeedforwardNet([obs_dim] + list(hidden_sizes) + [1],
                                   rng,
                                   output_gain=1.0)
        return cls(policy=policy,
                   value_net=value_net,
                   policy_opt=AdamState.for_params(policy.parameters(),
                                                   lr=config.policy_lr),
                   value_opt=AdamState.for_params(value_net.parameters(),
                                                  lr=config.value_lr))

    @property
    def obs_dim(self):
        return self.policy.obs_dim

    def value(self, obs):
        out = self.value_net.forward(obs)
        return out[..., 0].copy()


def compute_gae(trajectory, value_fn, gamma=0.99, lam=0.95):
    """Generalized advantage estimates for one time-ordered trajectory.

    ``delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)`` and
    ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``; the recursion also
    stops at a time-limit step, which bootstraps from ``next_aux_obs``.
    Advantages are returned before any normalization.

    Returns
    -------
    advantages, returns : :class:`numpy.ndarray`
        ``returns = advantages + V(s_t)``.
    """
    trajectory = list(trajectory)
    if not trajectory:
        raise ContractError("compute_gae: empty trajectory")
    n = len(trajectory)
    values = np.asarray(value_fn(np.array([t.aux_obs for t in trajectory])),
                        dtype=np.float64).reshape(n)

    next_values = np.zeros(n)
    bootstrap = []
    for t, step in enumerate(trajectory):
        if step.done:
            continue
        if t < n - 1 and not step.truncated:
            next_values[t] = values[t + 1]
        elif step.next_aux_obs is not None:
            bootstrap.append(t)
    if bootstrap:
        next_obs = np.array([trajectory[t].next_aux_obs for t in bootstrap])
        next_values[bootstrap] = np.asarray(value_fn(next_obs),
                                            dtype=np.float64).reshape(-1)

    advantages = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        step = trajectory[t]
        not_done = 0.0 if step.done else 1.0
        delta = step.r + gamma * next_values[t] * not_done - values[t]
        if step.done or step.truncated:
            running = 0.0
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
    return advantages, advantages + values


def buffer_advantages(buffer, value_fn, gamma, lam):
    """Run :func:`compute_gae` over every segment of ``buffer``."""
    advantages, returns = [], []
    for segment in buffer.segments():
        a, r = compute_gae(segment, value_fn, gamma, lam)
        advantages.append(a)
        returns.append(r)
    return np.concatenate(advantages), np.concatenate(returns)


def clipped_surrogate(ratio, advantages, clip_epsilon):
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return np.minimum(ratio * advantages, clipped * advantages)


def surrogate_objective(policy, obs, actions, old_log_prob, advantages,
                        clip_epsilon):
    """Mean clipped surrogate, the ratios and the fraction of clipped ratios."""
    new_log_prob = policy.log_prob(obs, actions)
    ratio = np.exp(new_log_prob - old_log_prob)
    objective = float(np.mean(clipped_surrogate(ratio, advantages,
                                                 clip_epsilon)))
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > clip_epsilon))
    return objective, ratio, clip_fraction


def _policy_gradients(policy, obs, actions, old_log_prob, advantages, config):
    n = len(obs)
    mean = policy.mean_net.forward(obs)
    std = policy.std
    z = (actions - mean) / std
    log_prob = (-0.5 * np.sum(z * z, axis=1) - np.sum(policy.log_std) -
                0.5 * policy.action_dim * math.log(2.0 * math.pi))
    ratio = np.exp(log_prob - old_log_prob)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - config.clip_epsilon,
                    1.0 + config.clip_epsilon) * advantages
    entropy = policy.entropy()
    loss = -float(np.mean(np.minimum(surr1, surr2))) - config.entropy_coef * entropy

    # the gradient only flows where the unclipped term is the minimum
    g_log_prob = -np.where(surr1 <= surr2, surr1, 0.0) / n
    g_mean = g_log_prob[:, None] * z / std
    grads, _ = policy.mean_net.backward(g_mean)
    grads = {f"mean_net.{k}": v for k, v in grads.items()}
    grads["log_std"] = (np.sum(g_log_prob[:, None] * (z * z - 1.0), axis=0) -
                        config.entropy_coef)
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > config.clip_epsilon))
    return loss, grads, entropy, clip_fraction


def ppo_update(learner, buffer, config, rng):
    """Clipped-surrogate update of ``learner`` from ``buffer``.

    Runs ``epochs_per_update`` passes of shuffled minibatches; the critic
    regresses the GAE returns with a squared loss; both gradient sets are
    clipped to ``max_grad_norm``. The epoch loop stops early once the
    approximate KL ``mean(old_log_prob - new_log_prob)`` exceeds
    ``target_kl``.

    Parameters
    ----------
    learner : :class:`PPOLearner`
        Updated in place.
    buffer : :class:`RolloutBuffer`
    config : :class:`PPOConfig`
    rng : :class:`numpy.random.Generator`
        Minibatch shuffling stream.

    Returns
    -------
    stats : :class:`PPOStats`
    """
    n = len(buffer)
    if n < config.minibatch_size:
        raise ContractError(
            f"ppo_update: buffer holds {n} transitions, fewer than minibatch_size {config.minibatch_size}"
        )
    obs, actions, old_log_prob = buffer.arrays()
    advantages, returns = buffer_advantages(buffer, learner.value, config.gamma,
                                            config.gae_lambda)
    if config.normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    surrogate_losses, value_losses, clip_fractions = [], [], []
    value_loss_history = []
    grad_norm = 0.0
    approx_kl = 0.0
    entropy = learner.policy.entropy()
    epochs_run = 0
    for epoch in range(config.epochs_per_update):
        order = rng.permutation(n)
        epoch_value_losses = []
        for k, start in enumerate(range(0, n, config.minibatch_size)):
            idx = order[start:start + config.minibatch_size]
            loss, grads, entropy, clip_fraction = _policy_gradients(
                learner.policy, obs[idx], actions[idx], old_log_prob[idx],
                advantages[idx], config)
            if not math.isfinite(loss):
                raise NonFiniteError(
                    f"ppo_update: non-finite policy loss in epoch {epoch}, minibatch {k}"
                )
            grads, grad_norm = clip_grad_norm(grads, config.max_grad_norm)
            params, learner.policy_opt = optimizer_step(
                learner.policy_opt, learner.policy.parameters(), grads)
            learner.policy.set_parameters(params)

            values = learner.value_net.forward(obs[idx])[:, 0]
            residual = values - returns[idx]
            value_loss = float(np.mean(residual * residual))
            if not math.isfinite(value_loss):
                raise NonFiniteError(
                    f"ppo_update: non-finite value loss in epoch {epoch}, minibatch {k}"
                )
            v_grads, _ = learner.value_net.backward(
                (2.0 * residual / len(idx))[:, None])
            v_grads, _ = clip_grad_norm(v_grads, config.max_grad_norm)
            v_params, learner.value_opt = optimizer_step(
                learner.value_opt, learner.value_net.parameters(), v_grads)
            learner.value_net.set_parameters(v_params)

            surrogate_losses.append(loss)
            value_losses.append(value_loss)
            epoch_value_losses.append(value_loss)
            clip_fractions.append(clip_fraction)
        epochs_run += 1
        value_loss_history.append(float(np.mean(epoch_value_losses)))
        approx_kl = float(
            np.mean(old_log_prob - learner.policy.log_prob(obs, actions)))
        if config.target_kl is not None and approx_kl > config.target_kl:
            logger.debug("ppo_update: early stop after epoch %d, approx KL %.4f",
                         epoch, approx_kl)
            break

    learner.n_updates += 1
    return PPOStats(surrogate_loss=float(np.mean(surrogate_losses)),
                    value_loss=float(np.mean(value_losses)),
                    entropy=float(entropy),
                    approx_kl=approx_kl,
                    clip_fraction=float(np.mean(clip_fractions)),
                    epochs_run=epochs_run,
                    grad_norm=float(grad_norm),
                    value_loss_history=value_loss_history)
