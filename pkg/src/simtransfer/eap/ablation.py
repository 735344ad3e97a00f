import dataclasses
import itertools
import logging
import math
import os
import typing
import warnings

import dask
import numpy as np
import xarray as xr
import yaml

from .config import from_dict, to_dict
from .error_prediction import FULL, PROJECTED
from .errors import ConfigurationError
from .parallel import compute

logger = logging.getLogger(__name__)

#: Axis name to the ``(section, field)`` of the config it sweeps.
AXES = {
    "horizon": ("error_fn", "horizon"),
    "representation": ("error_fn", "representation"),
    "mu_split": ("env", "observable"),
    "reference_choice": ("eap", "reference_index"),
}
_AXIS_ALIASES = {"horizon_T": "horizon", "T": "horizon"}
MAX_HORIZON = 8


def _axis_name(axis):
    axis = _AXIS_ALIASES.get(axis, axis)
    if axis not in AXES:
        raise ConfigurationError(
            f"ablation: unknown axis {axis!r}; axes are {sorted(AXES)}")
    return axis


def _check_values(axis, values):
    if not values:
        raise ConfigurationError(f"ablation: no values for axis {axis!r}")
    checked = []
    for value in values:
        if axis == "horizon":
            if isinstance(value, bool) or not isinstance(
                    value, int) or not 1 <= value <= MAX_HORIZON:
                raise ConfigurationError(
                    f"ablation: horizon values must be integers in 1..{MAX_HORIZON}, got {value!r}"
                )
        elif axis == "representation":
            if value not in (FULL, PROJECTED):
                raise ConfigurationError(
                    f"ablation: representation values must be {FULL!r} or {PROJECTED!r}, got {value!r}"
                )
        elif axis == "mu_split":
            if not isinstance(value, (list, tuple)) or not all(
                    isinstance(n, str) for n in value):
                raise ConfigurationError(
                    f"ablation: mu_split values must be lists of parameter names, got {value!r}"
                )
            value = list(value)
        elif axis == "reference_choice":
            if isinstance(value, bool) or not isinstance(value,
                                                         int) or value < 0:
                raise ConfigurationError(
                    f"ablation: reference_choice values must be population indices, got {value!r}"
                )
        checked.append(value)
    labels = [label(v) for v in checked]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"ablation: repeated {axis} values {labels}")
    return checked


def label(value):
    """Coordinate label of an axis value."""
    if isinstance(value, (list, tuple)):
        return "+".join(value) if value else "none"
    return str(value)


@dataclasses.dataclass
class AblationSpec:
    """A sweep over one config axis, optionally crossed with a second one.

    Every ``(value, cross_value, seed)`` cell is a full train and evaluate run.
    """
    axis: str
    values: typing.List[typing.Any]
    seeds: typing.List[int]
    cross_axis: typing.Optional[str] = None
    cross_values: typing.List[typing.Any] = dataclasses.field(
        default_factory=list)

    def __post_init__(self):
        self.axis = _axis_name(self.axis)
        self.values = _check_values(self.axis, list(self.values or []))
        self.seeds = [int(s) for s in (self.seeds or [])]
        if not self.seeds:
            raise ConfigurationError("ablation: seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"ablation: repeated seeds {self.seeds}")
        if self.cross_axis is not None:
            self.cross_axis = _axis_name(self.cross_axis)
            if self.cross_axis == self.axis:
                raise ConfigurationError(
                    "ablation: cross_axis must differ from axis")
            self.cross_values = _check_values(self.cross_axis,
                                              list(self.cross_values or []))
        elif self.cross_values:
            raise ConfigurationError(
                "ablation: cross_values given without cross_axis")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(
                f"ablation: unknown key(s) {unknown}; valid keys are {sorted(names)}")
        if "axis" not in data:
            raise ConfigurationError("ablation: spec names no axis")
        return cls(**data)

    def cells(self):
        cross = self.cross_values if self.cross_axis else [None]
        return list(itertools.product(self.values, cross, self.seeds))

    @property
    def n_runs(self):
        return len(self.cells())


def load_ablation_spec(path):
    """Read an ablation YAML file.

    Besides the :class:`AblationSpec` fields the file may carry
    ``base_config`` (a config path, relative to the spec file) and
    ``overrides`` (a list of ``key.path=value`` strings).

    Returns
    -------
    spec : :class:`AblationSpec`
    base_config : str or None
    overrides : list of str
    """
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigurationError(f"cannot read ablation spec {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    if not data:
        raise ConfigurationError(f"ablation spec {path} is empty")
    if not isinstance(data, dict):
        raise ConfigurationError(f"ablation spec {path} must be a mapping")
    base = data.pop("base_config", None)
    overrides = list(data.pop("overrides", None) or [])
    if base is not None and not os.path.isabs(base):
        base = os.path.join(os.path.dirname(os.path.abspath(path)), base)
    return AblationSpec.from_dict(data), base, overrides


def apply_axis(config, axis, value):
    """A copy of ``config`` with one axis set."""
    section, field = AXES[_axis_name(axis)]
    data = to_dict(config)
    data[section][field] = list(value) if isinstance(value,
                                                     (list, tuple)) else value
    return from_dict(data)


def cell_config(spec, base_config, value, cross_value, seed, output_dir=None):
    config = apply_axis(base_config, spec.axis, value)
    name = f"{spec.axis}-{label(value)}"
    if spec.cross_axis is not None:
        config = apply_axis(config, spec.cross_axis, cross_value)
        name += f"_{spec.cross_axis}-{label(cross_value)}"
    config.run.seed = int(seed)
    config.run.name = f"{name}_seed{seed}"
    if output_dir is not None:
        config.run.output_dir = os.path.join(output_dir, "runs")
    return config


def _default_runner(config):
    from .experiment import run_experiment
    return run_experiment(config)["normalized_mean"]


def _run_cell(runner, config):
    try:
        value = float(runner(config))
    except Exception as exc:
        logger.warning("ablation cell %s failed: %s: %s", config.run.name,
                       type(exc).__name__, exc)
        return math.nan, f"failed: {type(exc).__name__}: {exc}"
    return value, "ok"


def run_ablation(spec, base_config, runner=None, n_workers=1, output_dir=None):
    """Train and evaluate every cell of ``spec`` and tabulate the results.

    Parameters
    ----------
    spec : :class:`AblationSpec`
    base_config : :class:`~simtransfer.eap.config.ExperimentConfig`
    runner : callable, optional
        Maps a cell config to its mean normalized held-out return. Defaults to
        a full :func:`~simtransfer.eap.experiment.run_experiment`.
    n_workers : int
        Cells run concurrently on this many workers.
    output_dir : str, optional
        When given, cell runs go to ``output_dir/runs`` and the table is
        written as ``ablation.csv`` with ``ablation.svg`` next to it.

    Returns
    -------
    table : :class:`xarray.Dataset`
        ``normalized_return`` and ``status`` per cell, ``mean``, ``std`` and
        ``n_ok`` across seeds. Failed cells hold ``nan``.
    """
    runner = _default_runner if runner is None else runner
    cells = spec.cells()
    configs = [
        cell_config(spec, base_config, v, c, s, output_dir) for v, c, s in cells
    ]
    logger.info("ablation over %s: %d runs", spec.axis, len(configs))
    results = compute([dask.delayed(_run_cell)(runner, cfg) for cfg in configs],
                      n_workers)

    dims = ["value", "seed"]
    shape = [len(spec.values), len(spec.seeds)]
    coords = {
        "value": [label(v) for v in spec.values],
        "seed": spec.seeds,
    }
    if spec.cross_axis is not None:
        dims.insert(1, "cross_value")
        shape.insert(1, len(spec.cross_values))
        coords["cross_value"] = [label(v) for v in spec.cross_values]
    returns = np.array([r for r, _ in results]).reshape(shape)
    status = np.array([s for _, s in results], dtype=object).reshape(shape)

    table = xr.Dataset(
        {
            "normalized_return": (dims, returns),
            "status": (dims, status.astype(str)),
        },
        coords=coords,
    )
    n_ok = table["normalized_return"].notnull().sum("seed")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        table["mean"] = table["normalized_return"].mean("seed", skipna=True)
        table["std"] = table["normalized_return"].std("seed",
                                                      skipna=True,
                                                      ddof=1).where(n_ok > 1, 0.0)
    table["std"] = table["std"].where(n_ok > 0)
    table["n_ok"] = n_ok
    table.attrs.update(axis=spec.axis,
                       cross_axis=spec.cross_axis or "",
                       n_runs=len(configs),
                       n_failed=int((returns != returns).sum()))
    if table.attrs["n_failed"]:
        logger.warning("ablation: %d of %d runs failed", table.attrs["n_failed"],
                       len(configs))

    if output_dir is not None:
        from .plotting import plot_ablation
        os.makedirs(output_dir, exist_ok=True)
        ablation_frame(table).to_csv(os.path.join(output_dir, "ablation.csv"),
                                     index=False,
                                     float_format="%.17g")
        table[["normalized_return", "status"]].to_dataframe().reset_index().to_csv(
            os.path.join(output_dir, "ablation_cells.csv"),
            index=False,
            float_format="%.17g")
        plot_ablation(table, os.path.join(output_dir, "ablation.svg"))
    return table


def ablation_frame(table):
    """One row per axis value (and cross value): mean, std and successful
    runs."""
    return table[["mean", "std", "n_ok"]].to_dataframe().reset_index()
