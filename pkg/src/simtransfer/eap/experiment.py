"""Run-directory orchestration.

A run directory holds::

    config.yaml          resolved config, every default explicit
    population.txt       the environment population trained on
    metrics.csv          one row per update
    checkpoints/         ckpt_<iteration>.nc
    run.log              written by the command-line front end
    summary.yaml         final sample accounting
    report.csv/.nc/.svg  zero-shot evaluation
"""
import logging
import os
import shutil
import warnings

import xarray as xr
import yaml

from . import baselines, eap
from .checkpoint import checkpoint_path, latest_checkpoint
from .config import ESTIMATE_BOUNDS, RngStreams, dump_config, load_config
from .errors import CheckpointError, ConfigurationError
from .evaluation import (PolicyBundle, compare_methods, estimate_return_bounds,
                         evaluate_zero_shot, report_frame)
from .metrics import MetricsWriter, read_metrics, truncate_after
from .plotting import plot_comparison, plot_learning_curves, plot_report
from .population import load_population, sample_population, save_population

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
POPULATION_FILE = "population.txt"
METRICS_FILE = "metrics.csv"
LOG_FILE = "run.log"
SUMMARY_FILE = "summary.yaml"
ERROR_DATA_FILE = "error_dataset.csv"
CURVE_FILE = "learning_curve.svg"
REPORT_STEM = "report"


def run_dir_for(config):
    name = config.run.name or f"{config.env.task}_{config.run.method}_seed{config.run.seed}"
    return os.path.join(config.run.output_dir, name)


def prepare_run_dir(run_dir, resume=False, overwrite=False):
    """Create ``run_dir``; an existing run is only reused when resuming or
    replaced when ``overwrite`` is set."""
    existing = os.path.exists(os.path.join(run_dir, CONFIG_FILE))
    if existing and not resume:
        if not overwrite:
            raise ConfigurationError(
                f"run directory {run_dir} already holds a run; resume it, overwrite it or set run.name"
            )
        logger.info("replacing previous run in %s", run_dir)
        shutil.rmtree(run_dir)
    if resume and not existing:
        raise CheckpointError(f"cannot resume: no run in {run_dir}")
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    return run_dir


def obtain_population(config, descriptor):
    """The population a run trains on.

    An explicit ``env.population_file`` wins; baselines matched to another run
    reuse that run's population; otherwise it is sampled from the
    ``population`` stream of the master seed.
    """
    if config.env.population_file:
        return load_population(config.env.population_file, descriptor)
    if config.run.method != "eap" and config.baseline.match_run:
        path = os.path.join(config.baseline.match_run, POPULATION_FILE)
        logger.info("using the population of %s", config.baseline.match_run)
        return load_population(path, descriptor)
    return sample_population(descriptor,
                             config.env.k_train,
                             config.env.k_val,
                             config.env.k_heldout,
                             RngStreams(config.run.seed).seed_for("population"),
                             heldout_vary=config.env.heldout_vary)


def build_state(config, population):
    if config.run.method == "eap":
        return eap.build_eap_state(config, population)
    return baselines.build_baseline_state(config.run.method,
                                          population,
                                          config.ppo,
                                          config.baseline.budget,
                                          config.run.seed,
                                          config.net.hidden_sizes,
                                          config.net.log_std_init)


def _module_for(method):
    return eap if method == "eap" else baselines


def save_state(state, run_dir, method):
    return _module_for(method).save_state(
        state, checkpoint_path(run_dir, state.iteration))


def _counters(state, method):
    if method == "eap":
        return dict(state.counters(),
                    pretrain_status=state.pretrain_status,
                    faults=state.faults)
    return {
        "pretrain_samples": 0,
        "policy_samples": state.policy_samples,
        "error_samples": 0,
        "total_samples": state.total_samples,
        "budget": state.budget,
    }


def run_training(config, run_dir=None, resume=False, overwrite=False):
    """Train the configured method and fill its run directory.

    Parameters
    ----------
    config : :class:`~simtransfer.eap.config.ExperimentConfig`
        Resolved here; the resolved copy is what ``config.yaml`` holds.
    run_dir : str, optional
        Defaults to ``run.output_dir/run.name``.
    resume : bool
        Continue from the latest checkpoint of ``run_dir``; the config and
        population stored there are used.
    overwrite : bool
        Replace an existing run in ``run_dir``.

    Returns
    -------
    run_dir : str
    """
    resolved = config.resolve()
    run_dir = run_dir or run_dir_for(resolved)
    prepare_run_dir(run_dir, resume=resume, overwrite=overwrite)
    if resume:
        resolved = load_config(os.path.join(run_dir, CONFIG_FILE))
        population = load_population(os.path.join(run_dir, POPULATION_FILE),
                                     resolved.descriptor())
    else:
        dump_config(resolved, os.path.join(run_dir, CONFIG_FILE))
        population = obtain_population(resolved, resolved.descriptor())
        save_population(population, os.path.join(run_dir, POPULATION_FILE))

    method = resolved.run.method
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    metrics = MetricsWriter(metrics_path, method)
    state = build_state(resolved, population)
    module = _module_for(method)
    if resume:
        path = latest_checkpoint(run_dir)
        module.load_state(state, path)
        dropped = truncate_after(metrics_path, state.iteration)
        logger.info("resumed %s from %s (dropped %d metrics rows)", run_dir,
                    os.path.basename(path), dropped)

    def checkpoint_fn(s):
        return save_state(s, run_dir, method)

    logger.info("training %s on %s with seed %d in %s", method,
                population.descriptor.name, resolved.run.seed, run_dir)
    if method == "eap":
        if not resume:
            eap.pretrain_reference(state, resolved.ppo,
                                   resolved.eap.pretrain_budget,
                                   resolved.eap.pretrain_threshold, metrics)
            checkpoint_fn(state)
        eap.train_eap(state,
                      resolved.eap.iterations - state.iteration,
                      resolved.ppo,
                      metrics=metrics,
                      checkpoint_fn=checkpoint_fn,
                      checkpoint_every=resolved.run.checkpoint_every,
                      n_workers=resolved.run.n_workers)
        state.dataset.dump(os.path.join(run_dir, ERROR_DATA_FILE))
    else:
        baselines.train_baseline(method,
                                 population,
                                 resolved.ppo,
                                 resolved.baseline.budget,
                                 state=state,
                                 metrics=metrics,
                                 checkpoint_fn=checkpoint_fn,
                                 checkpoint_every=resolved.run.checkpoint_every)
    checkpoint_fn(state)

    summary = dict(method=method,
                   task=population.descriptor.name,
                   seed=resolved.run.seed,
                   population_hash=population.hash,
                   iterations=state.iteration,
                   failed_iterations=state.failed_iterations,
                   **_counters(state, method))
    with open(os.path.join(run_dir, SUMMARY_FILE), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=False)
    plot_learning_curves({method: read_metrics(metrics_path)},
                         os.path.join(run_dir, CURVE_FILE))
    logger.info("finished %s: %d total samples", run_dir,
                summary["total_samples"])
    return run_dir


def load_trained(run_dir, checkpoint=None):
    """Rebuild a run's state from its config, population and a checkpoint
    (the latest by default)."""
    config_path = os.path.join(run_dir, CONFIG_FILE)
    if not os.path.exists(config_path):
        raise CheckpointError(f"{run_dir} is not a run directory")
    config = load_config(config_path)
    population = load_population(os.path.join(run_dir, POPULATION_FILE),
                                 config.descriptor())
    state = build_state(config, population)
    path = checkpoint or latest_checkpoint(run_dir)
    _module_for(config.run.method).load_state(state, path)
    return config, population, state


def make_bundle(config, state, up_nu_mode=None):
    if config.run.method == "eap":
        return PolicyBundle.from_eap_state(state)
    mode = up_nu_mode or config.baseline.up_nu_mode
    if config.run.method == baselines.UP:
        baselines.warn_oracle(mode)
    return PolicyBundle.from_baseline_state(state, mode)


def return_bounds(config, descriptor):
    """The configured normalization bounds, measuring the random-policy worst
    bound on the reference environment when they are set to ``estimate``."""
    bounds = config.eval.return_bounds
    if bounds != ESTIMATE_BOUNDS:
        return bounds
    bounds = estimate_return_bounds(descriptor,
                                    n_episodes=config.eval.n_episodes,
                                    seed=config.eval.seed)
    logger.info("estimated return bounds %.2f, %.2f", *bounds)
    return bounds


def run_evaluation(run_dir,
                   population_file=None,
                   n_episodes=None,
                   mode=None,
                   seed=None,
                   n_workers=None,
                   checkpoint=None,
                   up_nu_mode=None):
    """Zero-shot evaluation of a trained run on held-out environments.

    Writes ``report.csv`` (with a warning banner when the evaluated population
    is not the training one), ``report.nc`` and ``report.svg`` into the run
    directory.

    Returns
    -------
    report : :class:`xarray.Dataset`
    """
    config, population, state = load_trained(run_dir, checkpoint)
    eval_population = population
    warning = ""
    if population_file:
        eval_population = load_population(population_file,
                                          population.descriptor)
        if eval_population.hash != population.hash:
            warning = (
                f"population {eval_population.hash[:12]} differs from the training population {population.hash[:12]}"
            )
            warnings.warn(warning, UserWarning)
    report = evaluate_zero_shot(make_bundle(config, state, up_nu_mode),
                                eval_population,
                                n_episodes=n_episodes or config.eval.n_episodes,
                                mode=mode or config.eval.mode,
                                seed=config.eval.seed if seed is None else seed,
                                n_workers=n_workers or config.run.n_workers,
                                bounds=return_bounds(config, population.descriptor),
                                train_seed=config.run.seed)
    report.attrs.update(warning=warning,
                        training_population_hash=population.hash,
                        checkpoint=os.path.basename(checkpoint or
                                                    latest_checkpoint(run_dir)))
    write_report(report, run_dir)
    return report


def write_report(report, directory, stem=REPORT_STEM):
    csv_path = os.path.join(directory, f"{stem}.csv")
    with open(csv_path, "w") as f:
        if report.attrs.get("warning"):
            f.write(f"# WARNING: {report.attrs['warning']}\n")
        for key in ("method", "task", "mode", "seed", "n_episodes",
                    "normalized_mean", "mean_return", "return_worst",
                    "return_best", "population_hash"):
            value = report.attrs[key]
            value = f"{value:.17g}" if isinstance(value, float) else value
            f.write(f"# {key}: {value}\n")
        report_frame(report).to_csv(f, index=False, float_format="%.17g")
    report.to_netcdf(os.path.join(directory, f"{stem}.nc"))
    plot_report(report, os.path.join(directory, f"{stem}.svg"))
    return csv_path


def read_report(run_dir, stem=REPORT_STEM):
    path = os.path.join(run_dir, f"{stem}.nc")
    if not os.path.exists(path):
        raise CheckpointError(f"{run_dir} has no evaluation report; run eval first")
    with xr.open_dataset(path) as report:
        return report.load()


def run_experiment(config, overwrite=True):
    """Train and evaluate one configuration.

    Returns
    -------
    result : dict
        ``run_dir``, ``normalized_mean`` and the evaluation ``report``.
    """
    run_dir = run_training(config, overwrite=overwrite)
    report = run_evaluation(run_dir)
    return {
        "run_dir": run_dir,
        "normalized_mean": report.attrs["normalized_mean"],
        "report": report,
    }


def final_counts(run_dir):
    """Sample counters of the last metrics row of a run."""
    last = read_metrics(os.path.join(run_dir, METRICS_FILE)).iloc[-1]
    return {
        name: int(last[name]) if last[name] == last[name] else 0
        for name in ("pretrain_samples", "policy_samples", "error_samples",
                     "total_samples")
    }


def compare_runs(run_dirs, output_dir, reference="eap", tolerance=0.01):
    """Compare evaluated runs grouped by method.

    Writes ``comparison.csv``, ``budget_audit.csv``, ``comparison.svg`` and
    ``learning_curves.svg`` to ``output_dir``.
    """
    reports, budgets, curves = {}, {}, {}
    for run_dir in sorted(run_dirs):
        config = load_config(os.path.join(run_dir, CONFIG_FILE))
        report = read_report(run_dir)
        method = report.attrs["method"]
        if report.attrs.get("up_nu_mode") == baselines.ORACLE:
            method = f"{method}_oracle"
        reports.setdefault(method, []).append(report)
        budgets.setdefault(method, []).append(final_counts(run_dir))
        curves[f"{method} seed {config.run.seed}"] = read_metrics(
            os.path.join(run_dir, METRICS_FILE))
    comparison = compare_methods(reports, budgets, reference, tolerance)
    os.makedirs(output_dir, exist_ok=True)
    comparison.table.to_csv(os.path.join(output_dir, "comparison.csv"),
                            float_format="%.17g")
    comparison.audit.to_csv(os.path.join(output_dir, "budget_audit.csv"),
                            float_format="%.17g")
    plot_comparison(comparison, os.path.join(output_dir, "comparison.svg"))
    plot_learning_curves(curves, os.path.join(output_dir,
                                              "learning_curves.svg"))
    logger.info("comparison of %s written to %s", sorted(reports), output_dir)
    return comparison
