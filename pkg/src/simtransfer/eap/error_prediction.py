import collections
import dataclasses
import logging
import math
import typing

import numpy as np
import pandas as pd

from .dynamics import EnvInstance
from .errors import (ConfigurationError, ContractError, DimensionError,
                     NonFiniteError)
from .networks import AdamState, BottleneckNet, FeedforwardNet, optimizer_step

logger = logging.getLogger(__name__)

FULL = "full"
PROJECTED = "projected"
_VARIANTS = (FULL, PROJECTED)


@dataclasses.dataclass
class ErrorFnConfig:
    horizon: int = 5
    representation: str = FULL
    latent_dim: typing.Optional[int] = None
    samples_per_refresh: int = 256
    epochs_per_refresh: int = 20
    minibatch_size: int = 64
    lr: float = 1e-3
    capacity: int = 50000

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ConfigurationError(
                f"error_fn.horizon must be >= 1, got {self.horizon}")
        if self.representation not in _VARIANTS:
            raise ConfigurationError(
                f"error_fn.representation must be one of {list(_VARIANTS)}, got {self.representation!r}"
            )
        if self.latent_dim is not None and int(self.latent_dim) < 1:
            raise ConfigurationError("error_fn.latent_dim must be >= 1 or null")
        for name in ("samples_per_refresh", "epochs_per_refresh",
                     "minibatch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"error_fn.{name} must be >= 1")
        if not self.lr > 0.0:
            raise ConfigurationError("error_fn.lr must be positive")
        if int(self.capacity) < int(self.samples_per_refresh):
            raise ConfigurationError(
                "error_fn.capacity must hold at least one collection round")


@dataclasses.dataclass
class ErrorSample:
    """Paired-rollout record: shared start ``s0``, the first action ``a0`` and
    both environments' states after ``T`` steps.

    ``source`` tags the population index of the validation environment.
    """
    s0: np.ndarray
    a0: np.ndarray
    sT_val: np.ndarray
    sT_ref: np.ndarray
    mu: np.ndarray
    source: int = -1

    def __post_init__(self):
        if not self.s0.shape == self.sT_val.shape == self.sT_ref.shape:
            raise DimensionError(
                f"ErrorSample: state shapes differ: {self.s0.shape}, {self.sT_val.shape}, {self.sT_ref.shape}"
            )
        if not np.all(np.isfinite(self.target)):
            raise ContractError("ErrorSample: non-finite error target")

    @property
    def target(self):
        return self.sT_ref - self.sT_val


class ErrorDataset:
    """FIFO store of :class:`ErrorSample` with provenance tags."""

    def __init__(self, capacity=50000):
        self.capacity = int(capacity)
        self.samples = collections.deque(maxlen=self.capacity)
        self.total_added = 0

    def __len__(self):
        return len(self.samples)

    def add(self, samples):
        samples = list(samples)
        if len(samples) > self.capacity:
            raise ContractError(
                f"ErrorDataset.add: {len(samples)} samples exceed capacity {self.capacity}"
            )
        self.samples.extend(samples)
        self.total_added += len(samples)
        return len(samples)

    def recent(self, n):
        n = min(int(n), len(self.samples))
        return list(self.samples)[len(self.samples) - n:]

    def arrays(self, samples=None):
        samples = list(self.samples) if samples is None else samples
        inputs = np.array(
            [np.concatenate([z.s0, z.a0, z.mu]) for z in samples])
        targets = np.array([z.target for z in samples])
        return inputs, targets

    def provenance(self):
        return collections.Counter(z.source for z in self.samples)

    def to_frame(self):
        rows = []
        for z in self.samples:
            row = {"source": z.source}
            for prefix, vec in (("s0", z.s0), ("a0", z.a0), ("sT_val", z.sT_val),
                                ("sT_ref", z.sT_ref), ("mu", z.mu)):
                row.update({f"{prefix}_{i}": v for i, v in enumerate(vec)})
            rows.append(row)
        return pd.DataFrame(rows)

    def dump(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


class RunningNormalizer:
    """Per-component running mean and standard deviation.

    Batches are merged with the parallel-variance update, so the result does not
    depend on how the data was chunked. ``std`` is floored at ``min_std``.
    """

    def __init__(self, dim, min_std=1e-8):
        self.dim = int(dim)
        self.min_std = float(min_std)
        self.count = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def update(self, batch):
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        n = batch.shape[0]
        if n == 0:
            return self
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean)**2).sum(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + batch_m2 + delta**2 * self.count * n / total
        self.count = total
        return self

    @property
    def std(self):
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.m2 / self.count), self.min_std)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    def state_dict(self):
        return {"count": self.count, "mean": self.mean.copy(), "m2": self.m2.copy()}

    def load_state_dict(self, state):
        self.count = int(state["count"])
        self.mean = np.array(state["mean"], dtype=np.float64)
        self.m2 = np.array(state["m2"], dtype=np.float64)


class ErrorPredictor:
    """``E(s, a, mu) -> e``.

    The ``full`` variant maps to a state-sized error; the ``projected``
    variant passes through a bottleneck and hands its latent to the policy.
    Both are trained on normalized targets. A fresh predictor reports no
    error: the full variant starts with a zero output layer and the projected
    latent reads as zero until the first call to :func:`train_error_fn`.
    """

    def __init__(self,
                 variant,
                 state_dim,
                 action_dim,
                 mu_dim,
                 hidden_sizes,
                 horizon,
                 rng,
                 latent_dim=None,
                 lr=1e-3):
        if variant not in _VARIANTS:
            raise ConfigurationError(f"ErrorPredictor: unknown variant {variant!r}")
        if int(horizon) < 1:
            raise ConfigurationError(f"ErrorPredictor: horizon must be >= 1")
        self.variant = variant
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.mu_dim = int(mu_dim)
        self.horizon = int(horizon)
        input_dim = self.state_dim + self.action_dim + self.mu_dim
        if variant == FULL:
            self.net = FeedforwardNet([input_dim] + list(hidden_sizes) +
                                      [self.state_dim],
                                      rng,
                                      output_gain=0.0)
        else:
            if latent_dim is None:
                raise ConfigurationError(
                    "ErrorPredictor: the projected variant needs latent_dim")
            self.net = BottleneckNet(input_dim,
                                     hidden_sizes,
                                     int(latent_dim),
                                     self.state_dim,
                                     rng,
                                     output_gain=0.0)
        self.input_normalizer = RunningNormalizer(input_dim, min_std=1e-3)
        self.target_normalizer = RunningNormalizer(self.state_dim, min_std=1e-8)
        self.opt = AdamState.for_params(self.net.parameters(), lr=lr)
        self.frozen = False
        self.n_updates = 0
        self.n_observed = 0

    @property
    def error_dim(self):
        return self.state_dim if self.variant == FULL else self.net.latent_dim

    def freeze_at_zero(self):
        """Make :meth:`predict` return zeros and training a no-op."""
        self.frozen = True
        return self

    def _inputs(self, s, a, mu):
        s, a, mu = (np.asarray(v, dtype=np.float64) for v in (s, a, mu))
        single = s.ndim == 1
        if single:
            s, a, mu = s[None, :], a[None, :], mu[None, :]
        if (s.shape[1], a.shape[1], mu.shape[1]) != (self.state_dim,
                                                     self.action_dim,
                                                     self.mu_dim):
            raise DimensionError(
                f"predict_error: expected (s, a, mu) dims ({self.state_dim}, {self.action_dim}, {self.mu_dim})"
            )
        x = np.clip(self.input_normalizer.normalize(np.hstack([s, a, mu])),
                    -10.0, 10.0)
        return single, x

    def predict(self, s, a, mu):
        single, x = self._inputs(s, a, mu)
        if self.frozen or (self.variant != FULL and self.n_updates == 0):
            e = np.zeros((x.shape[0], self.error_dim))
        elif self.variant == FULL:
            e = self.target_normalizer.denormalize(self.net.forward(x))
        else:
            e = self.net.encode(x).copy()
        return e[0] if single else e

    def reconstruct(self, s, a, mu):
        """State-sized error estimate (the decoder output for the projected
        variant)."""
        single, x = self._inputs(s, a, mu)
        e = self.target_normalizer.denormalize(self.net.forward(x))
        return e[0] if single else e


def predict_error(predictor, s, a, mu):
    return predictor.predict(s, a, mu)


def error_loss(predictions, targets):
    """Mean over samples of the squared error norm."""
    diff = np.asarray(predictions, dtype=np.float64) - np.asarray(
        targets, dtype=np.float64)
    diff = diff.reshape(diff.shape[0], -1) if diff.ndim > 1 else diff[None, :]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def _error_policy_input(state, mu, error_dim):
    return np.concatenate([state, mu, np.zeros(error_dim)])


def collect_error_data(policy,
                       descriptor,
                       ref_params,
                       val_params,
                       initial_states,
                       horizon,
                       n_samples,
                       rng,
                       error_dim,
                       source=-1):
    """Paired rollouts from shared start states.

    For every sample a start state is drawn from ``initial_states``; a
    reference and a validation simulator are both set to it and rolled
    ``horizon`` steps with the policy's mean action for input
    ``(s, mu_env, 0)``, each environment feeding its own ``mu``. The recorded
    first action is the validation rollout's.

    Returns
    -------
    samples : list of :class:`ErrorSample`
    skipped : int
        Starts that could not be set in one of the environments.
    """
    initial_states = np.asarray(initial_states, dtype=np.float64)
    if initial_states.ndim != 2 or initial_states.shape[0] == 0:
        raise ContractError("collect_error_data: empty initial-state buffer")
    if int(horizon) < 1:
        raise ContractError("collect_error_data: horizon must be >= 1")
    ref_env = EnvInstance(descriptor, ref_params)
    val_env = EnvInstance(descriptor, val_params)
    picks = rng.integers(initial_states.shape[0], size=int(n_samples))
    samples = []
    skipped = 0
    for pick in picks:
        s0 = initial_states[pick].copy()
        try:
            ref_env.set_state(s0)
            val_env.set_state(s0)
        except (ContractError, DimensionError):
            skipped += 1
            continue
        a0 = None
        for _ in range(int(horizon)):
            a_val = policy.mean(
                _error_policy_input(val_env.state, val_params.mu, error_dim))
            a_ref = policy.mean(
                _error_policy_input(ref_env.state, ref_params.mu, error_dim))
            if a0 is None:
                a0 = np.clip(a_val, descriptor.action_low,
                             descriptor.action_high)
            val_env.advance(a_val)
            ref_env.advance(a_ref)
        try:
            samples.append(
                ErrorSample(s0=s0,
                            a0=a0,
                            sT_val=val_env.state,
                            sT_ref=ref_env.state,
                            mu=val_params.mu.copy(),
                            source=int(source)))
        except ContractError:
            skipped += 1
    if skipped:
        logger.info("collect_error_data: skipped %d of %d starts", skipped,
                    len(picks))
    return samples, skipped


def train_error_fn(predictor, dataset, config, rng):
    """Regress the predictor onto the dataset's normalized error targets.

    The normalizers first absorb the samples added since the previous call;
    then ``config.epochs_per_refresh`` epochs of shuffled minibatches minimize
    the mean squared error norm, warm-starting from the current weights.

    Returns
    -------
    loss : float
        Final mean loss over the whole dataset in normalized units.
    """
    if len(dataset) < config.minibatch_size:
        raise ContractError(
            f"train_error_fn: dataset holds {len(dataset)} samples, fewer than minibatch_size {config.minibatch_size}"
        )
    if predictor.frozen:
        return 0.0
    fresh = dataset.recent(dataset.total_added - predictor.n_observed)
    if fresh:
        inputs, targets = dataset.arrays(fresh)
        predictor.input_normalizer.update(inputs)
        predictor.target_normalizer.update(targets)
        predictor.n_observed = dataset.total_added

    inputs, targets = dataset.arrays()
    x = np.clip(predictor.input_normalizer.normalize(inputs), -10.0, 10.0)
    y = predictor.target_normalizer.normalize(targets)
    n = x.shape[0]
    for epoch in range(int(config.epochs_per_refresh)):
        order = rng.permutation(n)
        for k, start in enumerate(range(0, n, int(config.minibatch_size))):
            idx = order[start:start + int(config.minibatch_size)]
            residual = predictor.net.forward(x[idx]) - y[idx]
            loss = float(np.mean(np.sum(residual * residual, axis=1)))
            if not math.isfinite(loss):
                raise NonFiniteError(
                    f"train_error_fn: non-finite loss in epoch {epoch}, minibatch {k}"
                )
            grads, _ = predictor.net.backward(2.0 * residual / len(idx))
            params, predictor.opt = optimizer_step(predictor.opt,
                                                   predictor.net.parameters(),
                                                   grads)
            predictor.net.set_parameters(params)
    predictor.n_updates += 1
    return error_loss(predictor.net.forward(x), y)
