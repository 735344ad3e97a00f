import dataclasses
import logging
import math
import typing

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

OBSERVABLE = "observable"
UNOBSERVABLE = "unobservable"
_ROLES = {OBSERVABLE, UNOBSERVABLE}

GRAVITY = 9.81
SUBSTEPS = 4
# velocity scale of the tanh-smoothed Coulomb friction terms
_FRICTION_SMOOTHING = 0.01
# test ranges reach this fraction of the train width past the upper end
_TEST_EXTENSION = 0.25


def _extended(lo, hi):
    return (lo, hi + _TEST_EXTENSION * (hi - lo))


@dataclasses.dataclass(frozen=True)
class ParamSpec:
    """A named, unit-annotated dynamics parameter with its sampling ranges.

    ``train_range`` is where training and validation environments are drawn
    from; ``test_range`` must reach past it on at least one side and is where
    held-out environments are drawn from.
    """
    name: str
    role: str
    unit: str
    train_range: typing.Tuple[float, float]
    test_range: typing.Tuple[float, float]

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(
                f"ParamSpec {self.name}: role must be one of {sorted(_ROLES)}, got {self.role!r}"
            )
        lo, hi = (float(v) for v in self.train_range)
        tlo, thi = (float(v) for v in self.test_range)
        if not lo < hi:
            raise ValueError(
                f"ParamSpec {self.name}: train_range must satisfy lo < hi, got {self.train_range}"
            )
        if not tlo <= thi:
            raise ValueError(
                f"ParamSpec {self.name}: test_range must satisfy lo <= hi, got {self.test_range}"
            )
        if not (tlo < lo or thi > hi):
            raise ValueError(
                f"ParamSpec {self.name}: test_range {self.test_range} lies inside train_range {self.train_range}"
            )
        object.__setattr__(self, "train_range", (lo, hi))
        object.__setattr__(self, "test_range", (tlo, thi))

    @property
    def midpoint(self):
        return 0.5 * (self.train_range[0] + self.train_range[1])

    @property
    def observable(self):
        return self.role == OBSERVABLE

    def contains(self, value, which="train"):
        if which == "train":
            lo, hi = self.train_range
        elif which == "test":
            lo, hi = self.test_range
        elif which == "any":
            lo = min(self.train_range[0], self.test_range[0])
            hi = max(self.train_range[1], self.test_range[1])
        else:
            raise ValueError(f"contains: unknown range {which!r}")
        return lo <= value <= hi

    def outside_pieces(self):
        """Parts of ``test_range`` lying outside ``train_range`` as
        ``(lo, hi, open_at)`` where ``open_at`` is the endpoint touching the
        train range."""
        lo, hi = self.train_range
        tlo, thi = self.test_range
        pieces = []
        if tlo < lo:
            pieces.append((tlo, min(thi, lo), "hi"))
        if thi > hi:
            pieces.append((max(tlo, hi), thi, "lo"))
        return pieces

    def with_role(self, role):
        return dataclasses.replace(self, role=role)


class DynamicsParams:
    """Observable (``mu``) and unobservable (``nu``) parameter vectors of one
    environment, ordered per the owning :class:`EnvDescriptor`.

    Instances are immutable; build them through
    :meth:`EnvDescriptor.make_params` to get range validation.
    """

    __slots__ = ("mu", "nu")

    def __init__(self, mu, nu):
        mu = np.array(mu, dtype=np.float64).reshape(-1)
        nu = np.array(nu, dtype=np.float64).reshape(-1)
        mu.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)

    def __setattr__(self, name, value):
        raise AttributeError("DynamicsParams is immutable")

    def __reduce__(self):
        return (DynamicsParams, (self.mu.copy(), self.nu.copy()))

    def __eq__(self, other):
        if not isinstance(other, DynamicsParams):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(
            self.nu, other.nu)

    def __hash__(self):
        return hash((self.mu.tobytes(), self.nu.tobytes()))

    def __repr__(self):
        return f"DynamicsParams(mu={self.mu.tolist()}, nu={self.nu.tolist()})"


@dataclasses.dataclass(frozen=True)
class PerturbationSpec:
    """One external impulse per episode.

    The force magnitude is drawn uniformly from ``magnitude_range`` (newtons),
    its sign uniformly, and it acts for ``duration_steps`` control steps
    starting at a step index drawn per ``timing``.
    """
    magnitude_range: typing.Tuple[float, float]
    duration_steps: int = 1
    timing: str = "uniform"

    def __post_init__(self):
        lo, hi = (float(v) for v in self.magnitude_range)
        if not (0.0 <= lo <= hi and math.isfinite(hi)):
            raise ValueError(
                f"PerturbationSpec: magnitude_range must satisfy 0 <= lo <= hi, got {self.magnitude_range}"
            )
        if self.duration_steps < 1:
            raise ValueError(
                f"PerturbationSpec: duration_steps must be >= 1, got {self.duration_steps}"
            )
        if self.timing != "uniform":
            raise ValueError(
                f"PerturbationSpec: unsupported timing {self.timing!r}")
        object.__setattr__(self, "magnitude_range", (lo, hi))


class _TaskModel:
    """Equations of motion and episode rules of one task.

    Physical coordinates are split into positions and velocities (tuples of
    floats); the observed state vector is ``encode(pos, vel)``.
    """
    name = None

    def accelerations(self, p, pos, vel, action, external):
        raise NotImplementedError

    def encode(self, pos, vel):
        return np.array(pos + vel, dtype=np.float64)

    def decode(self, state):
        state = [float(v) for v in state]
        half = len(state) // 2
        return tuple(state[:half]), tuple(state[half:])

    def feasible(self, p, state):
        return True

    def initial(self, p, rng):
        raise NotImplementedError

    def reward(self, p, pos, vel, action):
        raise NotImplementedError

    def failed(self, p, pos, vel):
        return False


class _CartPole(_TaskModel):
    name = "cartpole"
    theta_limit = 12.0 * math.pi / 180.0
    x_limit = 2.4

    def accelerations(self, p, pos, vel, action, external):
        x, theta = pos
        x_dot, theta_dot = vel
        m_p = p["pole_mass"]
        half = 0.5 * p["pole_length"]
        total = m_p + p["cart_mass"]
        sin = math.sin(theta)
        cos = math.cos(theta)

        force = action[0] + external - p["trans_friction"] * x_dot
        torque = (-p["rot_damping"] * theta_dot -
                  p["rot_friction"] * math.tanh(theta_dot / _FRICTION_SMOOTHING)
                  * m_p * GRAVITY * half)

        temp = (force + m_p * half * theta_dot * theta_dot * sin) / total
        theta_acc = (GRAVITY * sin - cos * temp + torque / (m_p * half)) / (
            half * (4.0 / 3.0 - m_p * cos * cos / total))
        x_acc = temp - m_p * half * theta_acc * cos / total
        return (x_acc, theta_acc)

    def encode(self, pos, vel):
        return np.array((pos[0], vel[0], pos[1], vel[1]), dtype=np.float64)

    def decode(self, state):
        x, x_dot, theta, theta_dot = (float(v) for v in state)
        return (x, theta), (x_dot, theta_dot)

    def initial(self, p, rng):
        s = rng.uniform(-0.05, 0.05, size=4)
        return self.decode(s)

    def reward(self, p, pos, vel, action):
        return 0.0 if self.failed(p, pos, vel) else 1.0

    def failed(self, p, pos, vel):
        return abs(pos[1]) > self.theta_limit or abs(pos[0]) > self.x_limit


class _Pendulum(_TaskModel):
    name = "pendulum"

    def accelerations(self, p, pos, vel, action, external):
        (theta,), (theta_dot,) = pos, vel
        length = p["pole_length"]
        mass = p["pole_mass"]
        g = GRAVITY * p["gravity_scale"]
        inertia = mass * length * length / 3.0
        # theta is measured from upright; the external force pushes the tip
        torque = (action[0] + external * length * math.cos(theta) -
                  p["joint_damping"] * theta_dot -
                  p["dry_friction"] * math.tanh(theta_dot / _FRICTION_SMOOTHING)
                  * mass * g * 0.5 * length)
        return ((mass * g * 0.5 * length * math.sin(theta) + torque) /
                inertia,)

    def encode(self, pos, vel):
        return np.array((math.cos(pos[0]), math.sin(pos[0]), vel[0]),
                        dtype=np.float64)

    def decode(self, state):
        c, s, theta_dot = (float(v) for v in state)
        return (math.atan2(s, c),), (theta_dot,)

    def feasible(self, p, state):
        return abs(state[0]**2 + state[1]**2 - 1.0) < 1e-6

    def initial(self, p, rng):
        return (rng.uniform(math.pi - 0.1, math.pi + 0.1),), (0.0,)

    def reward(self, p, pos, vel, action):
        wrapped = (pos[0] + math.pi) % (2.0 * math.pi) - math.pi
        return -(wrapped * wrapped + 0.1 * vel[0] * vel[0] +
                 0.001 * float(np.dot(action, action)))


class _Hopper(_TaskModel):
    name = "hopper"
    apex_ratio = 1.2
    collapse_ratio = 0.3

    def accelerations(self, p, pos, vel, action, external):
        (z,), (z_dot,) = pos, vel
        mass = p["body_mass"]
        rest = p["leg_length"]
        force = external - mass * GRAVITY * p["gravity_scale"]
        # the leg only pushes while compressed
        if z < rest:
            force += (p["leg_stiffness"] * (rest - z) -
                      p["leg_damping"] * z_dot + action[0])
        return (force / mass,)

    def feasible(self, p, state):
        return state[0] > 0.0

    def initial(self, p, rng):
        rest = p["leg_length"]
        return (rng.uniform(1.05 * rest, 1.15 * rest),), (0.0,)

    def reward(self, p, pos, vel, action):
        rest = p["leg_length"]
        miss = (pos[0] - self.apex_ratio * rest) / rest
        return 1.0 - miss * miss - 1e-4 * float(np.dot(action, action))

    def failed(self, p, pos, vel):
        return pos[0] < self.collapse_ratio * p["leg_length"]


_MODELS = {m.name: m for m in (_CartPole(), _Pendulum(), _Hopper())}


@dataclasses.dataclass(frozen=True, eq=False)
class EnvDescriptor:
    """Static description of a parameterized task.

    ``param_specs`` fixes the canonical parameter order; the observable
    (``mu``) and unobservable (``nu``) vectors follow that order restricted to
    each role. ``reference_values`` maps every parameter name to its value in
    the reference environment.
    """
    name: str
    state_dim: int
    action_dim: int
    dt: float
    max_steps: int
    param_specs: typing.Tuple[ParamSpec, ...]
    reference_values: typing.Tuple[typing.Tuple[str, float], ...]
    action_bounds: typing.Tuple[typing.Tuple[float, float], ...]
    perturbation: typing.Optional[PerturbationSpec] = None
    substeps: int = SUBSTEPS
    error_latent_dim: int = 2

    def __post_init__(self):
        if self.name not in _MODELS:
            raise ConfigurationError(f"EnvDescriptor: unknown task {self.name!r}")
        if self.state_dim < 1 or self.action_dim < 1 or self.max_steps < 1:
            raise ValueError(
                f"EnvDescriptor {self.name}: state_dim, action_dim and max_steps must be positive"
            )
        if not self.dt > 0:
            raise ValueError(f"EnvDescriptor {self.name}: dt must be positive")
        if len(self.action_bounds) != self.action_dim:
            raise DimensionError(
                f"EnvDescriptor {self.name}: {len(self.action_bounds)} action bounds for action_dim {self.action_dim}"
            )
        for lo, hi in self.action_bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(
                    f"EnvDescriptor {self.name}: action bounds must be finite with lo < hi"
                )
        names = [spec.name for spec in self.param_specs]
        if len(set(names)) != len(names):
            raise ValueError(
                f"EnvDescriptor {self.name}: duplicate parameter names {names}")
        reference = dict(self.reference_values)
        if set(reference) != set(names):
            raise ValueError(
                f"EnvDescriptor {self.name}: reference values must name exactly {names}"
            )
        for spec in self.param_specs:
            if not spec.contains(reference[spec.name], "train"):
                raise ValueError(
                    f"EnvDescriptor {self.name}: reference {spec.name}={reference[spec.name]} outside train_range {spec.train_range}"
                )
        if not 1 <= self.error_latent_dim < self.state_dim:
            raise ValueError(
                f"EnvDescriptor {self.name}: error_latent_dim must lie in [1, state_dim)"
            )

    @property
    def model(self):
        return _MODELS[self.name]

    @property
    def param_names(self):
        return [spec.name for spec in self.param_specs]

    @property
    def observable_names(self):
        return [spec.name for spec in self.param_specs if spec.observable]

    @property
    def unobservable_names(self):
        return [spec.name for spec in self.param_specs if not spec.observable]

    @property
    def mu_dim(self):
        return len(self.observable_names)

    @property
    def nu_dim(self):
        return len(self.unobservable_names)

    @property
    def action_low(self):
        return np.array([lo for lo, _ in self.action_bounds])

    @property
    def action_high(self):
        return np.array([hi for _, hi in self.action_bounds])

    def spec(self, name):
        for spec in self.param_specs:
            if spec.name == name:
                return spec
        raise ConfigurationError(
            f"{self.name}: unknown parameter {name!r}; known parameters are {self.param_names}"
        )

    @property
    def reference_params(self):
        return self.params_from_values(dict(self.reference_values), "train")

    def make_params(self, mu, nu, within="any"):
        """Build validated :class:`DynamicsParams`.

        Parameters
        ----------
        mu, nu : array-like
            Observable and unobservable values in descriptor order.
        within : str
            ``"train"``, ``"test"`` or ``"any"`` (the hull of both ranges).
        """
        params = DynamicsParams(mu, nu)
        if params.mu.size != self.mu_dim or params.nu.size != self.nu_dim:
            raise DimensionError(
                f"make_params: expected |mu|={self.mu_dim}, |nu|={self.nu_dim}, got {params.mu.size}, {params.nu.size}"
            )
        values = self.values_of(params)
        for spec in self.param_specs:
            value = values[spec.name]
            if not (math.isfinite(value) and spec.contains(value, within)):
                raise ValueError(
                    f"make_params: {spec.name}={value} outside its {within} range"
                )
        return params

    def params_from_values(self, values, within="any"):
        missing = set(self.param_names) - set(values)
        if missing:
            raise ConfigurationError(
                f"{self.name}: missing parameter values {sorted(missing)}")
        return self.make_params([values[n] for n in self.observable_names],
                                [values[n] for n in self.unobservable_names],
                                within)

    def values_of(self, params):
        values = dict(zip(self.observable_names, params.mu.tolist()))
        values.update(zip(self.unobservable_names, params.nu.tolist()))
        return values

    def midpoint_nu(self):
        return np.array([self.spec(n).midpoint for n in self.unobservable_names])


def remap_split(descriptor, new_observable_names):
    """Re-tag which parameters are observable.

    Parameters not listed in ``new_observable_names`` become unobservable; the
    canonical parameter order is kept, so the ``mu``/``nu`` orderings follow
    the new membership.
    """
    new_observable_names = list(new_observable_names)
    known = set(descriptor.param_names)
    unknown = [n for n in new_observable_names if n not in known]
    if unknown:
        raise ConfigurationError(
            f"remap_split: unknown parameter names {unknown}; known parameters are {descriptor.param_names}"
        )
    specs = tuple(
        spec.with_role(OBSERVABLE if spec.name in new_observable_names else
                       UNOBSERVABLE) for spec in descriptor.param_specs)
    return dataclasses.replace(descriptor, param_specs=specs)


def override_descriptor(descriptor,
                        dt=None,
                        max_steps=None,
                        train_ranges=None,
                        test_ranges=None,
                        perturbation=None):
    """Return ``descriptor`` with config-level overrides applied.

    Unspecified arguments keep the descriptor's values. Ranges are given as
    ``{name: (lo, hi)}``.
    """
    train_ranges = dict(train_ranges or {})
    test_ranges = dict(test_ranges or {})
    for name in list(train_ranges) + list(test_ranges):
        descriptor.spec(name)
    specs = []
    for spec in descriptor.param_specs:
        specs.append(
            dataclasses.replace(spec,
                                train_range=tuple(
                                    train_ranges.get(spec.name,
                                                     spec.train_range)),
                                test_range=tuple(
                                    test_ranges.get(spec.name,
                                                    spec.test_range))))
    changes = {"param_specs": tuple(specs)}
    if dt is not None:
        changes["dt"] = float(dt)
    if max_steps is not None:
        changes["max_steps"] = int(max_steps)
    if perturbation is not None:
        changes["perturbation"] = perturbation
    return dataclasses.replace(descriptor, **changes)


def cartpole_descriptor():
    """Pole balancing on a cart driven by a horizontal force in [-10, 10] N.

    State is (x, x_dot, theta, theta_dot). The pole length and the two masses
    are observable; rotational damping, rotational Coulomb friction and
    translational viscous friction are not.
    """
    specs = (
        ParamSpec("pole_length", OBSERVABLE, "m", (0.4, 0.7), (0.3, 0.8)),
        ParamSpec("pole_mass", OBSERVABLE, "kg", (0.08, 0.15),
                  _extended(0.08, 0.15)),
        ParamSpec("cart_mass", OBSERVABLE, "kg", (0.8, 1.3),
                  _extended(0.8, 1.3)),
        ParamSpec("rot_damping", UNOBSERVABLE, "N*m*s/rad", (0.0, 0.02),
                  _extended(0.0, 0.02)),
        ParamSpec("rot_friction", UNOBSERVABLE, "1", (0.0, 0.05),
                  _extended(0.0, 0.05)),
        ParamSpec("trans_friction", UNOBSERVABLE, "N*s/m", (0.0, 0.05),
                  _extended(0.0, 0.05)),
    )
    reference = (("pole_length", 0.6), ("pole_mass", 0.1), ("cart_mass", 1.0),
                 ("rot_damping", 0.005), ("rot_friction", 0.0),
                 ("trans_friction", 0.01))
    return EnvDescriptor(name="cartpole",
                         state_dim=4,
                         action_dim=1,
                         dt=0.02,
                         max_steps=500,
                         param_specs=specs,
                         reference_values=reference,
                         action_bounds=((-10.0, 10.0),),
                         error_latent_dim=2)


def pendulum_descriptor():
    """Torque-limited pendulum swing-up, theta measured from upright.

    State is encoded as (cos theta, sin theta, theta_dot).
    """
    specs = (
        ParamSpec("pole_length", OBSERVABLE, "m", (0.8, 1.2),
                  _extended(0.8, 1.2)),
        ParamSpec("pole_mass", OBSERVABLE, "kg", (0.8, 1.2),
                  _extended(0.8, 1.2)),
        ParamSpec("joint_damping", UNOBSERVABLE, "N*m*s/rad", (0.0, 0.1),
                  _extended(0.0, 0.1)),
        ParamSpec("dry_friction", UNOBSERVABLE, "1", (0.0, 0.05),
                  _extended(0.0, 0.05)),
        ParamSpec("gravity_scale", UNOBSERVABLE, "1", (0.9, 1.1),
                  _extended(0.9, 1.1)),
    )
    reference = (("pole_length", 1.0), ("pole_mass", 1.0),
                 ("joint_damping", 0.01), ("dry_friction", 0.0),
                 ("gravity_scale", 1.0))
    return EnvDescriptor(name="pendulum",
                         state_dim=3,
                         action_dim=1,
                         dt=0.05,
                         max_steps=200,
                         param_specs=specs,
                         reference_values=reference,
                         action_bounds=((-2.0, 2.0),),
                         error_latent_dim=2)


def hopper_descriptor():
    """Vertical spring-leg hopper: ballistic flight, spring-damper stance.

    State is (z, z_dot); the action is a leg force that only acts while the leg
    is compressed (z below the rest length).
    """
    specs = (
        ParamSpec("body_mass", OBSERVABLE, "kg", (0.8, 1.2),
                  _extended(0.8, 1.2)),
        ParamSpec("leg_length", OBSERVABLE, "m", (0.9, 1.1),
                  _extended(0.9, 1.1)),
        ParamSpec("leg_stiffness", UNOBSERVABLE, "N/m", (800.0, 1200.0),
                  _extended(800.0, 1200.0)),
        ParamSpec("leg_damping", UNOBSERVABLE, "N*s/m", (1.0, 5.0),
                  _extended(1.0, 5.0)),
        ParamSpec("gravity_scale", UNOBSERVABLE, "1", (0.9, 1.1),
                  _extended(0.9, 1.1)),
    )
    reference = (("body_mass", 1.0), ("leg_length", 1.0),
                 ("leg_stiffness", 1000.0), ("leg_damping", 2.0),
                 ("gravity_scale", 1.0))
    return EnvDescriptor(name="hopper",
                         state_dim=2,
                         action_dim=1,
                         dt=0.01,
                         max_steps=400,
                         param_specs=specs,
                         reference_values=reference,
                         action_bounds=((-50.0, 50.0),),
                         error_latent_dim=1)


TASKS = {
    "cartpole": cartpole_descriptor,
    "pendulum": pendulum_descriptor,
    "hopper": hopper_descriptor,
}


def get_descriptor(task):
    try:
        return TASKS[task]()
    except KeyError:
        raise ConfigurationError(
            f"unknown task {task!r}; available tasks are {sorted(TASKS)}"
        ) from None


def integrate(descriptor, values, pos, vel, action, external=0.0, substeps=None):
    """Advance physical coordinates by one control step with semi-implicit
    Euler: velocities first, then positions from the updated velocities."""
    model = descriptor.model
    n = descriptor.substeps if substeps is None else int(substeps)
    h = descriptor.dt / n
    for _ in range(n):
        acc = model.accelerations(values, pos, vel, action, external)
        vel = tuple(v + h * a for v, a in zip(vel, acc))
        pos = tuple(q + h * v for q, v in zip(pos, vel))
    return pos, vel


class EnvInstance:
    """A stateful simulator bound to one :class:`DynamicsParams`.

    Parameters
    ----------
    descriptor : :class:`EnvDescriptor`
    params : :class:`DynamicsParams`
    rng : :class:`numpy.random.Generator`, int or None
        Stream used for initial states and perturbation schedules.
    """

    def __init__(self, descriptor, params, rng=None):
        if params.mu.size != descriptor.mu_dim or params.nu.size != descriptor.nu_dim:
            raise DimensionError(
                f"EnvInstance: params do not match descriptor {descriptor.name}"
            )
        self.descriptor = descriptor
        self.params = params
        self.rng_stream = rng if isinstance(
            rng, np.random.Generator) else np.random.default_rng(rng)
        self._values = descriptor.values_of(params)
        self._model = descriptor.model
        self._pos = None
        self._vel = None
        self._impulse = None
        self.step_count = 0
        self.done = True
        self.terminated = False
        self.truncated = False
        self.last_action_clipped = False
        self.clip_count = 0

    @property
    def state(self):
        if self._pos is None:
            return None
        return self._model.encode(self._pos, self._vel)

    def reset(self):
        """Draw a state from the initial-state distribution and a fresh
        perturbation schedule."""
        self._pos, self._vel = self._model.initial(self._values,
                                                   self.rng_stream)
        self._impulse = self._draw_impulse()
        self.step_count = 0
        self.done = False
        self.terminated = False
        self.truncated = False
        return self.state

    def set_state(self, state):
        """Teleport the simulator to ``state`` and start a fresh episode there."""
        state = np.asarray(state, dtype=np.float64).reshape(-1)
        if state.size != self.descriptor.state_dim:
            raise DimensionError(
                f"set_state: expected state_dim {self.descriptor.state_dim}, got {state.size}"
            )
        if not np.all(np.isfinite(state)) or not self._model.feasible(
                self._values, state):
            raise ContractError(
                f"set_state: infeasible {self.descriptor.name} state {state.tolist()}"
            )
        self._pos, self._vel = self._model.decode(state)
        self._impulse = None
        self.step_count = 0
        self.done = False
        self.terminated = False
        self.truncated = False
        return self.state

    def _draw_impulse(self):
        spec = self.descriptor.perturbation
        if spec is None:
            return None
        last = max(self.descriptor.max_steps - spec.duration_steps, 0)
        start = int(self.rng_stream.integers(0, last + 1))
        magnitude = self.rng_stream.uniform(*spec.magnitude_range)
        sign = 1.0 if self.rng_stream.random() < 0.5 else -1.0
        return start, start + spec.duration_steps, sign * magnitude

    def _clip(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != self.descriptor.action_dim:
            raise DimensionError(
                f"step: expected action_dim {self.descriptor.action_dim}, got {action.size}"
            )
        clipped = np.clip(action, self.descriptor.action_low,
                          self.descriptor.action_high)
        self.last_action_clipped = bool(np.any(clipped != action))
        if self.last_action_clipped:
            self.clip_count += 1
        return tuple(clipped.tolist())

    def _external(self):
        if self._impulse is None:
            return 0.0
        start, stop, force = self._impulse
        return force if start <= self.step_count < stop else 0.0

    def advance(self, action):
        """Integrate one control step without episode bookkeeping.

        No reward, termination, step counting or perturbation; used where two
        simulators are rolled side by side from a shared state.
        """
        if self._pos is None:
            raise ContractError("advance: environment has no state")
        action = self._clip(action)
        self._pos, self._vel = integrate(self.descriptor, self._values,
                                         self._pos, self._vel, action)
        return self.state

    def step(self, action):
        """Advance one control step.

        Returns
        -------
        next_state : :class:`numpy.ndarray`
        reward : float
        done : bool
            True on task failure (``terminated``) or at ``max_steps``
            (``truncated``).
        """
        if self.done:
            raise ContractError(
                f"step: {self.descriptor.name} episode is done; call reset first"
            )
        action = self._clip(action)
        self._pos, self._vel = integrate(self.descriptor, self._values,
                                         self._pos, self._vel, action,
                                         self._external())
        self.step_count += 1
        reward = self._model.reward(self._values, self._pos, self._vel,
                                    np.asarray(action))
        self.terminated = self._model.failed(self._values, self._pos,
                                             self._vel)
        self.truncated = (not self.terminated and
                          self.step_count >= self.descriptor.max_steps)
        self.done = self.terminated or self.truncated
        return self.state, reward, self.done
