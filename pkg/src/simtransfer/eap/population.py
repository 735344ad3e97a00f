import dataclasses
import hashlib
import io
import logging
import typing

import numpy as np
import pandas as pd

from .dynamics import (DynamicsParams, EnvDescriptor, get_descriptor,
                       remap_split)
from .errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

SPLITS = ("training", "validation", "held_out")
POPULATION_FORMAT = "simtransfer-population v1"
_HELDOUT_VARY = {"both", "mu", "nu"}


@dataclasses.dataclass(eq=False)
class EnvPopulation:
    """An ordered list of environments with a training/validation/held-out
    split.

    ``training``, ``validation`` and ``held_out`` are disjoint index tuples that
    together cover every entry exactly once.
    """
    descriptor: EnvDescriptor
    entries: typing.List[DynamicsParams]
    training: typing.Tuple[int, ...]
    validation: typing.Tuple[int, ...]
    held_out: typing.Tuple[int, ...]
    seed: typing.Optional[int] = None

    def __post_init__(self):
        self.training = tuple(int(i) for i in self.training)
        self.validation = tuple(int(i) for i in self.validation)
        self.held_out = tuple(int(i) for i in self.held_out)
        indices = sorted(self.training + self.validation + self.held_out)
        if indices != list(range(len(self.entries))):
            raise ContractError(
                "EnvPopulation: split index sets must be disjoint and cover every entry exactly once"
            )
        for params in self.entries:
            if (params.mu.size != self.descriptor.mu_dim or
                    params.nu.size != self.descriptor.nu_dim):
                raise ContractError(
                    f"EnvPopulation: entry {params} does not match descriptor {self.descriptor.name}"
                )

    def __len__(self):
        return len(self.entries)

    def split_of(self, index):
        for name in SPLITS:
            if index in getattr(self, name):
                return name
        raise IndexError(f"split_of: no entry {index}")

    def subset(self, split):
        if split not in SPLITS:
            raise ValueError(f"subset: unknown split {split!r}")
        return [self.entries[i] for i in getattr(self, split)]

    def to_frame(self):
        """One row per entry: index, split and every parameter value in
        canonical order."""
        rows = []
        for i, params in enumerate(self.entries):
            row = {"index": i, "split": self.split_of(i)}
            row.update(self.descriptor.values_of(params))
            rows.append(row)
        columns = ["index", "split"] + self.descriptor.param_names
        return pd.DataFrame(rows, columns=columns)

    def remap(self, descriptor):
        """Re-express every entry under ``descriptor`` (same parameters,
        possibly a different observable/unobservable split)."""
        entries = [
            descriptor.params_from_values(self.descriptor.values_of(p))
            for p in self.entries
        ]
        return dataclasses.replace(self,
                                   descriptor=descriptor,
                                   entries=entries)

    @property
    def hash(self):
        return population_hash(self)


def _uniform(rng, interval):
    lo, hi = interval
    return float(rng.uniform(lo, hi))


def _outside(rng, spec):
    pieces = spec.outside_pieces()
    lengths = [hi - lo for lo, hi, _ in pieces]
    u = float(rng.random()) * sum(lengths)
    for (lo, hi, open_at), length in zip(pieces, lengths):
        if u < length or (lo, hi, open_at) == pieces[-1]:
            offset = min(u, length)
            value = hi - offset if open_at == "lo" else lo + offset
            break
        u -= length
    if spec.contains(value, "train"):
        value = 0.5 * (lo + hi)
    return value


def sample_population(descriptor,
                      k_train,
                      k_val,
                      k_heldout,
                      seed,
                      heldout_vary="both"):
    """Sample a population of environments.

    Training and validation entries draw every parameter uniformly from its
    train range. Held-out entries draw the parameters selected by
    ``heldout_vary`` from their test range (the rest from the train range) and
    force one of the selected parameters outside its train range.

    Parameters
    ----------
    descriptor : :class:`EnvDescriptor`
    k_train, k_val, k_heldout : int
        Split sizes, all at least 1.
    seed : int or :class:`numpy.random.Generator`
    heldout_vary : str
        ``"both"``, ``"mu"`` or ``"nu"``.

    Returns
    -------
    population : :class:`EnvPopulation`
        Entries are ordered training, validation, held-out.
    """
    for name, k in (("k_train", k_train), ("k_val", k_val), ("k_heldout",
                                                            k_heldout)):
        if int(k) < 1:
            raise ConfigurationError(
                f"sample_population: {name} must be >= 1, got {k}")
    if heldout_vary not in _HELDOUT_VARY:
        raise ConfigurationError(
            f"sample_population: heldout_vary must be one of {sorted(_HELDOUT_VARY)}, got {heldout_vary!r}"
        )
    rng = seed if isinstance(seed,
                             np.random.Generator) else np.random.default_rng(seed)

    varied = [
        spec.name
        for spec in descriptor.param_specs
        if spec.outside_pieces() and (heldout_vary == "both" or spec.observable
                                      == (heldout_vary == "mu"))
    ]
    if not varied:
        raise ConfigurationError(
            f"sample_population: no {heldout_vary} parameter of {descriptor.name} has a test range outside its train range"
        )

    entries = []
    for _ in range(int(k_train) + int(k_val)):
        values = {
            spec.name: _uniform(rng, spec.train_range)
            for spec in descriptor.param_specs
        }
        entries.append(descriptor.params_from_values(values, "train"))

    for _ in range(int(k_heldout)):
        forced = varied[int(rng.integers(len(varied)))]
        values = {}
        for spec in descriptor.param_specs:
            if spec.name == forced:
                values[spec.name] = _outside(rng, spec)
            elif spec.name in varied:
                values[spec.name] = _uniform(rng, spec.test_range)
            else:
                values[spec.name] = _uniform(rng, spec.train_range)
        entries.append(descriptor.params_from_values(values, "any"))

    k_train, k_val = int(k_train), int(k_val)
    return EnvPopulation(descriptor=descriptor,
                         entries=entries,
                         training=range(k_train),
                         validation=range(k_train, k_train + k_val),
                         held_out=range(k_train + k_val, len(entries)),
                         seed=seed if isinstance(seed, int) else None)


def _body(population):
    buffer = io.StringIO()
    population.to_frame().to_csv(buffer, index=False, float_format="%.17g")
    return buffer.getvalue()


def _header(population):
    d = population.descriptor
    return [
        f"# {POPULATION_FORMAT}",
        f"# task: {d.name}",
        f"# observable: {','.join(d.observable_names)}",
    ]


def population_hash(population):
    """sha256 of the canonical text of a population (task, split and
    values)."""
    text = "\n".join(_header(population)) + "\n" + _body(population)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_population(population, path):
    seed = "none" if population.seed is None else population.seed
    lines = _header(population) + [f"# seed: {seed}"]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        f.write(_body(population))
    logger.info("wrote population %s (%d entries) to %s", population.hash[:12],
                len(population), path)
    return path


def load_population(path, descriptor=None):
    """Read a population file written by :func:`save_population`.

    When ``descriptor`` is omitted it is rebuilt from the task and observable
    names in the header.
    """
    with open(path) as f:
        text = f.read()
    meta = {}
    body = []
    for line in text.splitlines(keepends=True):
        if line.startswith("#"):
            content = line[1:].strip()
            if ":" in content:
                key, value = content.split(":", 1)
                meta[key.strip()] = value.strip()
            else:
                meta["format"] = content
        else:
            body.append(line)
    if meta.get("format") != POPULATION_FORMAT:
        raise ConfigurationError(
            f"load_population: {path} is not a {POPULATION_FORMAT!r} file (found {meta.get('format')!r})"
        )
    observable = [n for n in meta.get("observable", "").split(",") if n]
    if descriptor is None:
        descriptor = remap_split(get_descriptor(meta["task"]), observable)
    elif descriptor.name != meta.get("task"):
        raise ConfigurationError(
            f"load_population: file holds task {meta.get('task')!r}, expected {descriptor.name!r}"
        )
    elif descriptor.observable_names != observable:
        descriptor = remap_split(descriptor, observable)

    frame = pd.read_csv(io.StringIO("".join(body)),
                        float_precision="round_trip")
    frame = frame.sort_values("index")
    entries = [
        descriptor.params_from_values(
            {n: float(row[n]) for n in descriptor.param_names}, "any")
        for _, row in frame.iterrows()
    ]
    splits = {
        name: tuple(frame.loc[frame["split"] == name, "index"].astype(int))
        for name in SPLITS
    }
    seed = meta.get("seed", "none")
    return EnvPopulation(descriptor=descriptor,
                         entries=entries,
                         seed=None if seed == "none" else int(seed),
                         **splits)
