import argparse
import contextlib
import logging
import os
import sys

from . import experiment
from .ablation import ablation_frame, load_ablation_spec, run_ablation
from .config import (METHODS, OUTPUT_ROOT_ENV, apply_overrides, default_config,
                     from_dict, load_config, to_dict)
from .dynamics import TASKS
from .errors import ConfigurationError, Error
from .population import load_population

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _configure_logging(verbose):
    root = logging.getLogger("simtransfer")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, logging.StreamHandler) and
               not isinstance(h, logging.FileHandler) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(handler)


@contextlib.contextmanager
def _run_log(run_dir):
    root = logging.getLogger("simtransfer")
    handler = logging.FileHandler(os.path.join(run_dir, experiment.LOG_FILE))
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def _config_from_args(args):
    overrides = list(args.overrides or [])
    if args.config:
        return load_config(args.config, overrides)
    config = default_config(args.task, args.method)
    return from_dict(apply_overrides(to_dict(config), overrides))


def cmd_train(args):
    if args.resume:
        run_dir = args.resume
        config = load_config(os.path.join(run_dir, experiment.CONFIG_FILE))
    else:
        config = _config_from_args(args)
        run_dir = experiment.run_dir_for(config.resolve())
    experiment.prepare_run_dir(run_dir,
                               resume=bool(args.resume),
                               overwrite=args.overwrite)
    with _run_log(run_dir):
        experiment.run_training(config, run_dir, resume=bool(args.resume))
        if args.eval:
            experiment.run_evaluation(run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_eval(args):
    with _run_log(args.run_dir):
        report = experiment.run_evaluation(args.run_dir,
                                           population_file=args.population,
                                           n_episodes=args.episodes,
                                           mode=args.mode,
                                           seed=args.seed,
                                           n_workers=args.workers,
                                           checkpoint=args.checkpoint,
                                           up_nu_mode=args.up_nu_mode)
    if report.attrs["warning"]:
        print(f"WARNING: {report.attrs['warning']}")
    print(f"{report.attrs['method']} normalized return "
          f"{report.attrs['normalized_mean']:.4f} over {report.sizes['env']} held-out environments")
    return EXIT_OK


def cmd_ablate(args):
    spec, base_path, spec_overrides = load_ablation_spec(args.spec)
    overrides = spec_overrides + list(args.overrides or [])
    base_path = args.config or base_path
    if base_path:
        base = load_config(base_path, overrides)
    else:
        base = from_dict(
            apply_overrides(to_dict(default_config(args.task, "eap")),
                            overrides))
    output = args.output or os.path.join(
        os.environ.get(OUTPUT_ROOT_ENV, "runs"), f"ablation_{spec.axis}")
    os.makedirs(output, exist_ok=True)
    with _run_log(output):
        table = run_ablation(spec, base, n_workers=args.workers, output_dir=output)
    print(ablation_frame(table).to_string(index=False))
    return EXIT_OK if table.attrs["n_failed"] < table.attrs["n_runs"] else EXIT_RUNTIME


def cmd_compare(args):
    comparison = experiment.compare_runs(args.run_dirs,
                                         args.output,
                                         reference=args.reference,
                                         tolerance=args.tolerance)
    print(comparison.table.to_string())
    if comparison.audit is not None:
        print()
        print(comparison.audit.to_string())
        if not comparison.budget_ok:
            print("WARNING: sample budgets differ by more than "
                  f"{100 * args.tolerance:g}% from {args.reference}")
    return EXIT_OK


def cmd_inspect_population(args):
    population = load_population(args.path)
    print(f"task: {population.descriptor.name}")
    print(f"observable: {', '.join(population.descriptor.observable_names)}")
    print(f"hash: {population.hash}")
    print(f"training: {len(population.training)}  validation: "
          f"{len(population.validation)}  held_out: {len(population.held_out)}")
    print(population.to_frame().to_string(index=False))
    return EXIT_OK


def _add_overrides(parser):
    parser.add_argument("--set",
                        dest="overrides",
                        action="append",
                        metavar="KEY=VALUE",
                        help="override a config field, e.g. error_fn.T=5")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simtransfer-eap",
        description="Error-aware policy training and zero-shot transfer evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one method")
    train.add_argument("--config", help="YAML config file")
    train.add_argument("--task", choices=sorted(TASKS), default="cartpole",
                       help="task of the default config when --config is absent")
    train.add_argument("--method", choices=METHODS, default="eap",
                       help="method of the default config when --config is absent")
    _add_overrides(train)
    train.add_argument("--resume", metavar="RUN_DIR",
                       help="continue a run from its latest checkpoint")
    train.add_argument("--overwrite", action="store_true",
                       help="replace an existing run of the same name")
    train.add_argument("--eval", action="store_true",
                       help="evaluate on the held-out environments afterwards")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="zero-shot evaluation of a run")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("--population", help="population file to evaluate on")
    evaluate.add_argument("--episodes", type=int)
    evaluate.add_argument("--mode", choices=("mean", "sample"))
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--workers", type=int)
    evaluate.add_argument("--checkpoint", help="checkpoint file (default: latest)")
    evaluate.add_argument("--up-nu-mode", choices=("midpoint", "oracle"))
    evaluate.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", help="run an ablation sweep")
    ablate.add_argument("spec", help="ablation spec YAML file")
    ablate.add_argument("--config", help="base config (overrides the spec's)")
    ablate.add_argument("--task", choices=sorted(TASKS), default="cartpole")
    _add_overrides(ablate)
    ablate.add_argument("--output", help="output directory")
    ablate.add_argument("--workers", type=int, default=1)
    ablate.set_defaults(func=cmd_ablate)

    compare = sub.add_parser("compare", help="compare evaluated runs")
    compare.add_argument("run_dirs", nargs="+")
    compare.add_argument("--output", required=True)
    compare.add_argument("--reference", default="eap")
    compare.add_argument("--tolerance", type=float, default=0.01)
    compare.set_defaults(func=cmd_compare)

    inspect = sub.add_parser("inspect-population",
                             help="print a population file")
    inspect.add_argument("path")
    inspect.set_defaults(func=cmd_inspect_population)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Error as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
