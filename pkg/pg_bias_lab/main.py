# ABOUTME: This file is the command-line entry point of pg-bias-lab.
# ABOUTME: It parses subcommands and overrides, sets up logging and turns failures into an error JSON and exit code.
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime

from pg_bias_lab import __version__
from pg_bias_lab.config_manager import ENVIRONMENTS, ConfigManager, default_config, payload_hash
from pg_bias_lab.estimator import REGULARIZERS
from pg_bias_lab.exceptions import ConfigError, ExperimentFailedError, LabException
from pg_bias_lab.harness import (ALIAS_EXACT, ALIAS_MONTE_CARLO, AliasToySettings, diagnostic_context,
                                 run_alias_toy, run_bias_spread, run_feature_pca, run_loss_surface,
                                 run_offpolicy, run_performance)
from pg_bias_lab.optim import ALGORITHMS
from pg_bias_lab.run_store import RunStore, error_payload

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON ExperimentConfig file")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--env", choices=ENVIRONMENTS)
    parser.add_argument("--bias", choices=("on", "off"), help="undiscounted (on) or discounted (off) state weighting")
    parser.add_argument("--optimizer", choices=ALGORITHMS, help="optimizer of the experimental/corrected variant")
    parser.add_argument("--regularizer", choices=[r.replace("_", "-") for r in REGULARIZERS])
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pg-bias-lab",
                                     description="Measure the state-distribution bias of policy-gradient estimators.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run-performance", "biased/unbiased x baseline/experimental learning curves"),
                            ("run-bias-spread", "four-fork bias-spread measurement along a baseline run"),
                            ("run-offpolicy", "uncorrected vs corrected training under a perturbed state distribution"),
                            ("validate-config", "check a configuration and print it with its hash")):
        _add_common_arguments(commands.add_parser(name, help=help_text))

    toy = commands.add_parser("alias-toy", help="alias-MDP fixed points and return decay vs closed form")
    toy.add_argument("--gammas", type=float, nargs="+", default=[0.3, 0.5, 0.7, 0.9])
    toy.add_argument("--modes", nargs="+", choices=(ALIAS_EXACT, ALIAS_MONTE_CARLO), default=[ALIAS_EXACT])
    toy.add_argument("--out", help="output directory")

    diag = commands.add_parser("diag", help="diagnostics on a trained policy")
    diag_commands = diag.add_subparsers(dest="diagnostic", required=True)
    surface = diag_commands.add_parser("loss-surface", help="score-model loss surface around a policy")
    surface.add_argument("--resolution", type=int, default=11, help="odd grid resolution")
    pca = diag_commands.add_parser("feature-pca", help="2-D PCA of hidden features coloured by action")
    pca.add_argument("--layer", type=int, default=2)
    for sub in (surface, pca):
        _add_common_arguments(sub)
        sub.add_argument("--checkpoint", help="policy checkpoint JSON (default: freshly initialized policy)")
    return parser


def load_config(args: argparse.Namespace) -> ConfigManager:
    manager = ConfigManager.load(args.config) if args.config else ConfigManager(default_config(args.env or "pendulum"))
    manager.apply_overrides(env=args.env, bias=args.bias, optimizer=args.optimizer, regularizer=args.regularizer,
                            alpha=args.alpha, beta=args.beta, lr=args.lr, gamma=args.gamma, seed=args.seed,
                            out=args.out, workers=args.workers)
    return manager


def setup_logging(output_dir: str) -> str:
    log_dir = os.path.join(output_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, f'pg-bias-lab-{datetime.now().strftime("%Y%m%d")}.log')

    logging.basicConfig(
        level=logging.DEBUG,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True,
    )
    # console stays at INFO, the file gets everything
    logging.getLogger().handlers[1].setLevel(logging.INFO)
    return log_file


def _output_dir(args: argparse.Namespace) -> str:
    if getattr(args, "out", None):
        return args.out
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                return json.load(f).get("output_dir", "runs")
        except (OSError, ValueError, AttributeError):
            return "runs"
    return "runs"


def execute(args: argparse.Namespace) -> int:
    if args.command == "alias-toy":
        store = RunStore(args.out or "runs")
        settings = AliasToySettings()
        rows = run_alias_toy(args.gammas, args.modes, settings, store)
        payload = {"gammas": args.gammas, "modes": args.modes, "settings": asdict(settings)}
        store.write_manifest("alias-toy", payload, payload_hash(payload), list(settings.seeds),
                             extra={"rows": len(rows)})
        return EXIT_OK

    manager = load_config(args)
    config = manager.config
    if args.command == "validate-config":
        print(manager.to_json())
        print(f"config_hash {manager.config_hash()}")
        return EXIT_OK

    store = RunStore(config.output_dir)
    outcome = None
    if args.command == "run-performance":
        outcome = run_performance(config, store)
    elif args.command == "run-bias-spread":
        outcome = run_bias_spread(config, store)
    elif args.command == "run-offpolicy":
        outcome = run_offpolicy(config, store)
    elif args.command == "diag":
        context = diagnostic_context(config, args.checkpoint)
        if args.diagnostic == "loss-surface":
            run_loss_surface(context, store, grid_resolution=args.resolution)
        else:
            run_feature_pca(context, store, layer=args.layer)
        store.write_manifest(f"diag {args.diagnostic}", manager.to_dict(), manager.config_hash(), config.seeds,
                             extra={"checkpoint": args.checkpoint})
    if outcome is not None and outcome.all_failed():
        error = ExperimentFailedError(f"{args.command}: every job failed; statuses and errors are in "
                                      f"{store.path('manifest.json')} and the log")
        store.write_error(error)
        raise error
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log_file = setup_logging(_output_dir(args))
    logger.info(f"Starting pg-bias-lab {__version__}: {args.command}")
    logger.info(f"Log file: {log_file}")
    try:
        return execute(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(json.dumps(error_payload(e)), file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except LabException as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(json.dumps(error_payload(e)), file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(json.dumps(error_payload(e)), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
