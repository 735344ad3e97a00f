import copy
import dataclasses
import hashlib
import logging
import math
import typing
import warnings

import dask
import numpy as np
import pandas as pd
import xarray as xr

from .baselines import MIDPOINT, BaselineKind, baseline_test_input
from .config import RETURN_BOUNDS
from .dynamics import EnvDescriptor, EnvInstance
from .eap import ErrorAwareInput
from .error_prediction import ErrorPredictor
from .errors import ConfigurationError, ContractError, ParityError
from .networks import GaussianPolicyHead
from .parallel import compute
from .population import EnvPopulation
from .rollouts import constant_tail_input

logger = logging.getLogger(__name__)

EVAL_MODES = ("mean", "sample")


@dataclasses.dataclass(eq=False)
class PolicyBundle:
    """A frozen policy together with the input rule it is evaluated with.

    For ``method="eap"`` the bundle carries the error predictor and every
    action goes through the uncorrected-action, predict, corrected-action
    chain. Baselines build their input with :func:`baseline_test_input`.
    """
    method: str
    descriptor: EnvDescriptor
    policy: GaussianPolicyHead
    predictor: typing.Optional[ErrorPredictor] = None
    up_nu_mode: str = MIDPOINT

    def __post_init__(self):
        if self.method == "eap":
            if self.predictor is None:
                raise ConfigurationError("PolicyBundle: eap needs a predictor")
        else:
            BaselineKind(self.method)

    @classmethod
    def from_eap_state(cls, state):
        return cls("eap", state.descriptor, state.policy, state.predictor)

    @classmethod
    def from_baseline_state(cls, state, up_nu_mode=MIDPOINT):
        return cls(state.kind.kind, state.descriptor, state.policy,
                   up_nu_mode=up_nu_mode)

    def input_fn(self, params, rng, mode="mean"):
        if self.method == "eap":
            return ErrorAwareInput(self.policy,
                                   self.predictor,
                                   self.descriptor,
                                   params.mu,
                                   self.predictor.error_dim,
                                   rng=rng,
                                   mode=mode)
        return constant_tail_input(
            baseline_test_input(self.method, self.descriptor, params.mu,
                                params.nu, self.up_nu_mode))

    def purity_counters(self):
        """Update counters and a parameter checksum; evaluation must leave
        all of them unchanged."""
        digest = hashlib.sha256()
        for name, value in sorted(self.policy.parameters().items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        counters = {"policy": digest.hexdigest()}
        if self.predictor is not None:
            digest = hashlib.sha256()
            for name, value in sorted(self.predictor.net.parameters().items()):
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(value).tobytes())
            counters.update(predictor=digest.hexdigest(),
                            predictor_updates=self.predictor.n_updates,
                            predictor_observed=self.predictor.n_observed,
                            input_norm_count=self.predictor.input_normalizer.count)
        return counters


def normalized_return(mean_return, bounds):
    """``(R - worst) / (best - worst)``; for tasks whose worst return is zero
    this is the return divided by the maximum return."""
    worst, best = (float(b) for b in bounds)
    if not best > worst:
        raise ValueError(
            f"normalized_return: bounds must satisfy worst < best, got {bounds}")
    return (np.asarray(mean_return, dtype=np.float64) - worst) / (best - worst)


def _episodes(bundle, params, n_episodes, mode, seed):
    env_seq, act_seq = np.random.SeedSequence(int(seed)).spawn(2)
    act_rng = np.random.default_rng(act_seq)
    env = EnvInstance(bundle.descriptor, params,
                      rng=np.random.default_rng(env_seq))
    input_fn = bundle.input_fn(params, act_rng, mode)
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    for k in range(n_episodes):
        state = env.reset()
        total = 0.0
        while not env.done:
            obs = input_fn(state)
            if mode == "mean":
                action = bundle.policy.mean(obs)
            else:
                action, _ = bundle.policy.sample(obs, act_rng)
            state, reward, _ = env.step(action)
            total += reward
        returns[k] = total
        lengths[k] = env.step_count
    return returns, lengths


def evaluate_zero_shot(bundle,
                       envs,
                       n_episodes=20,
                       mode="mean",
                       seed=0,
                       n_workers=1,
                       bounds=None,
                       population_hash="",
                       train_seed=None):
    """Roll a frozen policy on held-out environments.

    No data is collected for training and no parameter changes; the bundle's
    counters are compared before and after.

    Parameters
    ----------
    bundle : :class:`PolicyBundle`
    envs : :class:`~simtransfer.eap.population.EnvPopulation` or list
        A population (its held-out entries are used) or a list of
        ``(index, DynamicsParams)`` pairs.
    n_episodes : int
    mode : str
        ``"mean"`` executes mean actions, ``"sample"`` draws them.
    seed : int
        Evaluation seed; each environment gets its own child seed.
    bounds : tuple of float, optional
        ``(worst, best)`` returns for normalization; defaults per task.

    Returns
    -------
    report : :class:`xarray.Dataset`
        ``episode_return`` and ``episode_length`` over ``(env, episode)``,
        per-environment ``mean_return``, ``std_return`` and
        ``normalized_return``, parameter values over ``(env, param)``.
    """
    if mode not in EVAL_MODES:
        raise ConfigurationError(
            f"evaluate_zero_shot: mode must be one of {list(EVAL_MODES)}, got {mode!r}"
        )
    if int(n_episodes) < 1:
        raise ConfigurationError("evaluate_zero_shot: n_episodes must be >= 1")
    descriptor = bundle.descriptor
    if isinstance(envs, EnvPopulation):
        population_hash = population_hash or envs.hash
        envs = [(i, envs.entries[i]) for i in envs.held_out]
    envs = list(envs)
    if not envs:
        raise ContractError("evaluate_zero_shot: no environments to evaluate")
    bounds = tuple(RETURN_BOUNDS[descriptor.name] if bounds is None else bounds)

    before = bundle.purity_counters()
    seeds = np.random.SeedSequence(int(seed)).generate_state(len(envs),
                                                             np.uint32)
    tasks = [
        dask.delayed(_episodes)(copy.deepcopy(bundle), params, int(n_episodes),
                                mode, int(s))
        for (_, params), s in zip(envs, seeds)
    ]
    results = compute(tasks, n_workers)
    if bundle.purity_counters() != before:
        raise ContractError("evaluate_zero_shot: evaluation modified the policy")

    returns = np.array([r for r, _ in results])
    lengths = np.array([n for _, n in results])
    mean = returns.mean(axis=1)
    values = np.array([[descriptor.values_of(p)[name]
                        for name in descriptor.param_names]
                       for _, p in envs])
    report = xr.Dataset(
        {
            "episode_return": (("env", "episode"), returns),
            "episode_length": (("env", "episode"), lengths),
            "mean_return": ("env", mean),
            "std_return": ("env", returns.std(axis=1)),
            "normalized_return": ("env", normalized_return(mean, bounds)),
            "params": (("env", "param"), values),
        },
        coords={
            "env": [i for i, _ in envs],
            "episode": np.arange(int(n_episodes)),
            "param": descriptor.param_names,
        },
    )
    report.attrs.update(
        method=bundle.method,
        task=descriptor.name,
        mode=mode,
        seed=int(seed),
        train_seed=-1 if train_seed is None else int(train_seed),
        n_episodes=int(n_episodes),
        return_worst=bounds[0],
        return_best=bounds[1],
        population_hash=population_hash,
        mean_return=float(mean.mean()),
        normalized_mean=float(report["normalized_return"].mean()),
        up_nu_mode=bundle.up_nu_mode if bundle.method != "eap" else "",
    )
    logger.info("%s on %d held-out environments: normalized return %.4f",
                bundle.method, len(envs), report.attrs["normalized_mean"])
    return report


def report_frame(report):
    """One row per environment for the report CSV."""
    frame = report[["mean_return", "std_return",
                    "normalized_return"]].to_dataframe()
    params = report["params"].to_pandas()
    return frame.join(params).reset_index()


def _random_episodes(descriptor, params, n_episodes, seed):
    rng = np.random.default_rng(seed)
    env = EnvInstance(descriptor, params, rng=rng)
    returns = []
    for _ in range(n_episodes):
        env.reset()
        total = 0.0
        while not env.done:
            _, reward, _ = env.step(
                rng.uniform(descriptor.action_low, descriptor.action_high))
            total += reward
        returns.append(total)
    return float(np.mean(returns))


def estimate_return_bounds(descriptor,
                           params=None,
                           n_episodes=10,
                           seed=0,
                           tuned=None):
    """``(worst, best)`` returns for normalization.

    The worst bound is the mean return of uniformly random actions; the best
    bound is the mean-action return of ``tuned`` (a :class:`PolicyBundle`
    trained on ``params``) or the task default when no tuned policy is given.
    """
    params = descriptor.reference_params if params is None else params
    worst = _random_episodes(descriptor, params, int(n_episodes), seed)
    if tuned is None:
        best = RETURN_BOUNDS[descriptor.name][1]
    else:
        returns, _ = _episodes(tuned, params, int(n_episodes), "mean", seed)
        best = float(returns.mean())
    if not best > worst:
        raise ContractError(
            f"estimate_return_bounds: best return {best} does not exceed worst {worst}"
        )
    return worst, best


def aggregate_seeds(reports):
    """Stack the per-seed summaries of one method's reports along ``seed``.

    ``normalized_std`` is the sample standard deviation across seeds (zero for
    a single seed).
    """
    reports = list(reports)
    if not reports:
        raise ContractError("aggregate_seeds: no reports")
    methods = {r.attrs["method"] for r in reports}
    if len(methods) != 1:
        raise ParityError(f"aggregate_seeds: mixed methods {sorted(methods)}")
    seeds = [int(r.attrs["train_seed"]) for r in reports]
    normalized = np.array([r.attrs["normalized_mean"] for r in reports])
    summary = xr.Dataset(
        {
            "normalized_mean": ("seed", normalized),
            "mean_return": ("seed", [r.attrs["mean_return"] for r in reports]),
            "population_hash": ("seed", [r.attrs["population_hash"] for r in reports]),
        },
        coords={"seed": seeds},
    )
    summary.attrs.update(
        method=methods.pop(),
        task=reports[0].attrs["task"],
        n_seeds=len(reports),
        normalized_mean=float(normalized.mean()),
        normalized_std=float(normalized.std(ddof=1)) if len(reports) > 1 else 0.0,
    )
    return summary


@dataclasses.dataclass
class Comparison:
    table: pd.DataFrame
    improvements: typing.Dict[str, float]
    ranking: typing.List[str]
    audit: typing.Optional[pd.DataFrame] = None
    budget_ok: typing.Optional[bool] = None


def _check_parity(summaries):
    tasks = {s.attrs["task"] for s in summaries.values()}
    if len(tasks) != 1:
        raise ParityError(f"compare_methods: reports cover several tasks {sorted(tasks)}")
    by_seed = {}
    for method, summary in summaries.items():
        for seed, digest in zip(summary["seed"].values,
                                summary["population_hash"].values):
            seen = by_seed.setdefault(int(seed), (method, str(digest)))
            if seen[1] != str(digest):
                raise ParityError(
                    f"compare_methods: seed {seed} of {method!r} was evaluated on population {str(digest)[:12]}, {seen[0]!r} on {seen[1][:12]}"
                )


def compare_methods(reports, budgets=None, reference="eap", tolerance=0.01):
    """Rank methods and report the reference method's relative improvement.

    Parameters
    ----------
    reports : dict
        Method name to a list of per-seed evaluation reports.
    budgets : dict, optional
        Method name to a list of per-seed sample counts (mappings with
        ``policy_samples``, ``error_samples`` and ``total_samples``).
    reference : str
        Method whose improvement over the others is reported.
    tolerance : float
        Largest relative deviation of a method's mean total samples from the
        reference's before the budget audit fails.

    Returns
    -------
    comparison : :class:`Comparison`
        ``improvements[m] = (R_ref - R_m) / R_m`` on mean normalized returns.
    """
    if reference not in reports:
        raise ConfigurationError(f"compare_methods: no reports for {reference!r}")
    summaries = {m: aggregate_seeds(r) for m, r in reports.items()}
    _check_parity(summaries)

    rows = []
    for method, summary in summaries.items():
        rows.append({
            "method": method,
            "normalized_mean": summary.attrs["normalized_mean"],
            "normalized_std": summary.attrs["normalized_std"],
            "n_seeds": summary.attrs["n_seeds"],
        })
    table = pd.DataFrame(rows).set_index("method")
    table = table.sort_values("normalized_mean", ascending=False, kind="mergesort")
    table["rank"] = np.arange(1, len(table) + 1)

    ref_value = table.loc[reference, "normalized_mean"]
    improvements = {}
    for method in table.index:
        if method == reference:
            continue
        base = table.loc[method, "normalized_mean"]
        if base == 0.0:
            warnings.warn(
                f"compare_methods: {method} has a zero mean normalized return; improvement undefined",
                UserWarning)
            improvements[method] = math.nan
        else:
            improvements[method] = float((ref_value - base) / base)
    table[f"{reference}_improvement_pct"] = [
        math.nan if m == reference else 100.0 * improvements[m]
        for m in table.index
    ]

    comparison = Comparison(table=table,
                            improvements=improvements,
                            ranking=list(table.index))
    if budgets:
        comparison.audit, comparison.budget_ok = budget_audit(
            budgets, reference, tolerance)
    return comparison


def budget_audit(budgets, reference="eap", tolerance=0.01):
    """Per-method sample accounting and its deviation from the reference.

    Returns
    -------
    audit : :class:`pandas.DataFrame`
    ok : bool
        Whether every method's mean total lies within ``tolerance`` of the
        reference's.
    """
    rows = []
    for method, counts in budgets.items():
        counts = list(counts)
        rows.append({
            "method": method,
            "policy_samples": float(np.mean([c.get("policy_samples", 0) for c in counts])),
            "pretrain_samples": float(np.mean([c.get("pretrain_samples", 0) for c in counts])),
            "error_samples": float(np.mean([c.get("error_samples", 0) for c in counts])),
            "total_samples": float(np.mean([c["total_samples"] for c in counts])),
        })
    audit = pd.DataFrame(rows).set_index("method")
    if reference not in audit.index:
        raise ConfigurationError(f"budget_audit: no budget for {reference!r}")
    ref_total = audit.loc[reference, "total_samples"]
    audit["deviation"] = (audit["total_samples"] - ref_total).abs() / ref_total
    audit["within_tolerance"] = audit["deviation"] <= tolerance
    ok = bool(audit["within_tolerance"].all())
    if not ok:
        logger.warning("budget audit failed: deviations %s",
                       audit["deviation"].to_dict())
    return audit, ok
