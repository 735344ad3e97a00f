import logging

import numpy as np

from .errors import ContractError
from .ppo import RolloutBuffer, Transition

logger = logging.getLogger(__name__)


def constant_tail_input(*tails):
    """Policy input ``(s, *tails)`` with fixed tail vectors.

    Used for reference pretraining (``mu_0`` and a zero error), the universal
    policy (true ``mu`` and ``nu``) and domain randomization (no tail).
    """
    tail = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1)
                           for t in tails]) if tails else np.zeros(0)

    def input_fn(state):
        return np.concatenate([state, tail])

    return input_fn


def collect_rollouts(policy,
                     env,
                     n_steps,
                     input_fn,
                     rng,
                     deterministic=False,
                     buffer=None):
    """Run ``policy`` in ``env`` for exactly ``n_steps`` transitions.

    The environment is reset first and after every finished episode. The last
    transition of the collection is marked ``truncated`` so advantage
    estimation bootstraps from it.

    Parameters
    ----------
    policy : :class:`~simtransfer.eap.networks.GaussianPolicyHead`
    env : :class:`~simtransfer.eap.dynamics.EnvInstance`
    n_steps : int
    input_fn : callable
        Maps a state vector to the policy input vector.
    rng : :class:`numpy.random.Generator`
        Action sampling stream.
    deterministic : bool
        Use the mean action instead of sampling.
    buffer : :class:`~simtransfer.eap.ppo.RolloutBuffer`, optional
        Appended to in place when given.

    Returns
    -------
    buffer : :class:`~simtransfer.eap.ppo.RolloutBuffer`
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ContractError(f"collect_rollouts: n_steps must be >= 1, got {n_steps}")
    buffer = RolloutBuffer() if buffer is None else buffer
    state = env.reset()
    episode_return = 0.0
    for t in range(n_steps):
        obs = input_fn(state)
        if deterministic:
            action = policy.mean(obs)
            log_prob = float(policy.log_prob(obs, action))
        else:
            action, log_prob = policy.sample(obs, rng)
            log_prob = float(log_prob)
        next_state, reward, done = env.step(action)
        episode_return += reward
        last = t == n_steps - 1
        truncated = env.truncated or (last and not env.terminated)
        buffer.append(
            Transition(s=state,
                       a_hat=action,
                       r=reward,
                       s_next=next_state,
                       mu=env.params.mu,
                       log_prob=log_prob,
                       done=env.terminated,
                       aux_obs=obs,
                       truncated=truncated,
                       next_aux_obs=input_fn(next_state) if truncated else None))
        if done:
            buffer.end_episode(episode_return, env.step_count)
            episode_return = 0.0
            if not last:
                state = env.reset()
        else:
            state = next_state
    return buffer
