import dataclasses
import logging
import math
import typing

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

_ACTIVATIONS = {"tanh", "identity"}


def orthogonal(shape, gain, rng):
    """Orthogonal matrix of ``shape`` scaled by ``gain``; all zeros for a zero
    gain."""
    rows, cols = shape
    if gain == 0:
        return np.zeros(shape)
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class FeedforwardNet:
    """Dense network ``y = f_L(... f_1(x W_1 + b_1) ...)``.

    Hidden layers use ``hidden_activation``; the output layer uses
    ``output_activation``. Weights are stored as ``(fan_in, fan_out)``
    matrices so a batch of inputs of shape ``(n, fan_in)`` propagates with a
    single matrix product per layer.

    Parameters
    ----------
    layer_sizes : list of int
        ``[input_dim, hidden..., output_dim]``.
    rng : :class:`numpy.random.Generator`, optional
        Used for orthogonal initialization. Without it all parameters start at
        zero.
    hidden_gain, output_gain : float
        Orthogonal init gains; biases always start at zero.
    """

    def __init__(self,
                 layer_sizes,
                 rng=None,
                 hidden_gain=math.sqrt(2.0),
                 output_gain=1.0,
                 hidden_activation="tanh",
                 output_activation="identity"):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(
                f"FeedforwardNet: need at least two positive layer sizes, got {layer_sizes}"
            )
        for name in (hidden_activation, output_activation):
            if name not in _ACTIVATIONS:
                raise ValueError(
                    f"FeedforwardNet: unknown activation {name!r}")
        self.layer_sizes = layer_sizes
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        n_layers = len(layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1],
                                                  layer_sizes[1:])):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            if rng is None:
                self.weights.append(np.zeros((fan_in, fan_out)))
            else:
                self.weights.append(orthogonal((fan_in, fan_out), gain, rng))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    def _activation(self, i):
        if i == len(self.weights) - 1:
            return self.output_activation
        return self.hidden_activation

    def forward(self, x):
        """Evaluate the network on one input vector or a batch of rows and
        cache the activations for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise DimensionError(
                f"forward: expected input dimension {self.input_dim}, got shape {x.shape}"
            )
        inputs = []
        outputs = []
        h = batch
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            h = np.tanh(z) if self._activation(i) == "tanh" else z
            outputs.append(h)
        self._cache = (single, inputs, outputs)
        return h[0] if single else h

    def backward(self, output_gradient):
        """Reverse-mode gradients of ``sum(output_gradient * output)`` for the
        cached forward pass.

        Returns
        -------
        grads : dict
            Parameter name to gradient array, same keys as :meth:`parameters`.
        input_gradient : :class:`numpy.ndarray`
            Gradient with respect to the cached input, same shape as the input.
        """
        if self._cache is None:
            raise ContractError("backward: no cached forward pass")
        single, inputs, outputs = self._cache
        g = np.asarray(output_gradient, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != outputs[-1].shape:
            raise DimensionError(
                f"backward: gradient shape {g.shape} does not match output shape {outputs[-1].shape}"
            )
        grads = {}
        for i in reversed(range(len(self.weights))):
            if self._activation(i) == "tanh":
                g = g * (1.0 - outputs[i]**2)
            grads[f"layer{i}.weight"] = inputs[i].T @ g
            grads[f"layer{i}.bias"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)

    def parameters(self):
        """Parameter name to the live parameter array."""
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layer{i}.weight"] = w
            params[f"layer{i}.bias"] = b
        return params

    def set_parameters(self, params):
        for i in range(len(self.weights)):
            w = np.asarray(params[f"layer{i}.weight"], dtype=np.float64)
            b = np.asarray(params[f"layer{i}.bias"], dtype=np.float64)
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise DimensionError(f"set_parameters: shape mismatch in layer{i}")
            self.weights[i] = w.copy()
            self.biases[i] = b.copy()
        self._cache = None

    def copy(self):
        clone = FeedforwardNet(self.layer_sizes,
                               hidden_activation=self.hidden_activation,
                               output_activation=self.output_activation)
        clone.set_parameters(self.parameters())
        return clone


def forward(net, x):
    return net.forward(x)


def backward(net, output_gradient):
    return net.backward(output_gradient)


class BottleneckNet:
    """Encoder to a low-dimensional latent followed by a decoder back to the
    full output dimension.

    The encoder is ``[input_dim, *hidden_sizes, latent_dim]`` with a linear
    latent; the decoder mirrors the hidden sizes,
    ``[latent_dim, *reversed(hidden_sizes), output_dim]``.
    """

    def __init__(self,
                 input_dim,
                 hidden_sizes,
                 latent_dim,
                 output_dim,
                 rng=None,
                 output_gain=1.0):
        if not 1 <= latent_dim < output_dim:
            raise ValueError(
                f"BottleneckNet: latent_dim must lie in [1, {output_dim}), got {latent_dim}"
            )
        hidden_sizes = list(hidden_sizes)
        self.encoder = FeedforwardNet([input_dim] + hidden_sizes +
                                      [latent_dim],
                                      rng,
                                      output_gain=1.0)
        self.decoder = FeedforwardNet([latent_dim] +
                                      hidden_sizes[::-1] + [output_dim],
                                      rng,
                                      output_gain=output_gain)

    @property
    def input_dim(self):
        return self.encoder.input_dim

    @property
    def latent_dim(self):
        return self.encoder.output_dim

    @property
    def output_dim(self):
        return self.decoder.output_dim

    def encode(self, x):
        return self.encoder.forward(x)

    def forward(self, x):
        return self.decoder.forward(self.encoder.forward(x))

    def backward(self, output_gradient):
        decoder_grads, latent_gradient = self.decoder.backward(output_gradient)
        encoder_grads, input_gradient = self.encoder.backward(latent_gradient)
        grads = {f"encoder.{k}": v for k, v in encoder_grads.items()}
        grads.update({f"decoder.{k}": v for k, v in decoder_grads.items()})
        return grads, input_gradient

    def parameters(self):
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update(
            {f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return params

    def set_parameters(self, params):
        for prefix, net in (("encoder.", self.encoder), ("decoder.",
                                                         self.decoder)):
            net.set_parameters({
                k[len(prefix):]: v
                for k, v in params.items()
                if k.startswith(prefix)
            })


class GaussianPolicyHead:
    """State-independent diagonal Gaussian around the output of ``mean_net``.

    ``log_std`` is clamped to ``[LOG_STD_MIN, LOG_STD_MAX]`` whenever it is
    set.
    """
    LOG_STD_MIN = -5.0
    LOG_STD_MAX = 1.0

    def __init__(self, mean_net, log_std=-0.5):
        self.mean_net = mean_net
        self.log_std = np.full(mean_net.output_dim, float(log_std)) if np.ndim(
            log_std) == 0 else np.array(log_std, dtype=np.float64)
        self.log_std = self._clamp(self.log_std)

    @classmethod
    def build(cls, obs_dim, hidden_sizes, action_dim, rng, log_std=-0.5):
        return cls(
            FeedforwardNet([obs_dim] + list(hidden_sizes) + [action_dim],
                           rng,
                           output_gain=0.01), log_std)

    def _clamp(self, log_std):
        return np.clip(log_std, self.LOG_STD_MIN, self.LOG_STD_MAX)

    @property
    def obs_dim(self):
        return self.mean_net.input_dim

    @property
    def action_dim(self):
        return self.mean_net.output_dim

    @property
    def std(self):
        return np.exp(self.log_std)

    def mean(self, obs):
        return self.mean_net.forward(obs).copy()

    def log_prob(self, obs, actions):
        """Log density of ``actions`` (one row per observation row)."""
        mean = self.mean_net.forward(obs)
        z = (np.asarray(actions, dtype=np.float64) - mean) / self.std
        return (-0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) -
                0.5 * self.action_dim * math.log(2.0 * math.pi))

    def sample(self, obs, rng):
        mean = self.mean_net.forward(obs)
        action = mean + self.std * rng.standard_normal(mean.shape)
        z = (action - mean) / self.std
        log_prob = (-0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) -
                    0.5 * self.action_dim * math.log(2.0 * math.pi))
        return action, log_prob

    def entropy(self):
        return float(
            np.sum(self.log_std) + 0.5 * self.action_dim *
            math.log(2.0 * math.pi * math.e))

    def parameters(self):
        params = {f"mean_net.{k}": v for k, v in self.mean_net.parameters().items()}
        params["log_std"] = self.log_std
        return params

    def set_parameters(self, params):
        self.mean_net.set_parameters({
            k[len("mean_net."):]: v
            for k, v in params.items()
            if k.startswith("mean_net.")
        })
        self.log_std = self._clamp(
            np.array(params["log_std"], dtype=np.float64))


def gaussian_sample(head, obs, rng):
    return head.sample(obs, rng)


def gaussian_mean(head, obs):
    return head.mean(obs)


@dataclasses.dataclass
class AdamState:
    """Adaptive-moment optimizer state for a named set of parameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: typing.Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: typing.Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr,
                   beta1=beta1,
                   beta2=beta2,
                   eps=eps,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(opt_state, params, grads):
    """One Adam step.

    Inputs are not modified; the function returns ``(new_params,
    new_opt_state)``, so identical inputs always give identical outputs.
    """
    if set(grads) != set(params) or set(opt_state.m) != set(params):
        raise DimensionError(
            f"optimizer_step: parameter names differ between params, grads and state"
        )
    t = opt_state.step + 1
    b1, b2 = opt_state.beta1, opt_state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or opt_state.m[name].shape != p.shape:
            raise DimensionError(
                f"optimizer_step: shape mismatch for {name}: param {p.shape}, grad {g.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"optimizer_step: non-finite gradient in {name}")
        m = b1 * opt_state.m[name] + (1.0 - b1) * g
        v = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        updated = p - opt_state.lr * m_hat / (np.sqrt(v_hat) + opt_state.eps)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(
                f"optimizer_step: update made {name} non-finite")
        new_params[name], new_m[name], new_v[name] = updated, m, v
    return new_params, dataclasses.replace(opt_state, step=t, m=new_m, v=new_v)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) scaled gradients and the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def finite_difference_gradients(loss_fn, params, h=1e-5):
    """Central finite differences of a scalar ``loss_fn()`` with respect to
    every entry of ``params`` (name to live array, perturbed in place and
    restored)."""
    grads = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            saved = p[idx]
            p[idx] = saved + h
            up = loss_fn()
            p[idx] = saved - h
            down = loss_fn()
            p[idx] = saved
            g[idx] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads
