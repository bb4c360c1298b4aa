"""
Command line entry point.

Verbs:
    run         one experiment from a config file
    compare     the same config under every baseline scheme on a shared seed
    ber-table   bit error rate of every candidate level over an Es/N0 grid
    importance  one-shot per-layer Hessian importance report

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from flsim.config import COMPARE_SCHEMES, ExperimentConfig, load_config, with_overrides
from flsim.datasets import take
from flsim.errors import ConfigError
from flsim.hessian import layer_importance
from flsim.modem import ber_table
from flsim.orchestrator import init_state, prepare_data, run_experiment, run_round
from flsim.outputs import write_outputs, write_summary
from flsim.seeding import Purpose


def setup_logging(verbose: bool = False):
    """Configure logging for the script."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config)
    return with_overrides(
        config,
        seed=args.seed,
        scheme=getattr(args, "scheme", None),
        rounds=args.rounds,
        n_jobs=args.jobs,
        deterministic=True if args.deterministic else None,
    )


def cmd_run(args) -> int:
    config = _config_from_args(args)
    result = run_experiment(config, progress=not args.quiet)
    write_outputs(result.records, result.plan_log, args.out, result)
    return 2 if result.aborted is not None else 0


def _run_scheme(config: ExperimentConfig, scheme: str, out: Path, data, progress: bool):
    scheme_config = with_overrides(config, scheme=scheme)
    result = run_experiment(scheme_config, data, progress=progress)
    write_outputs(result.records, result.plan_log, out / scheme, result)
    return scheme, result


def cmd_compare(args) -> int:
    config = _config_from_args(args)
    out = Path(args.out)
    data = prepare_data(config)
    schemes = args.schemes or list(COMPARE_SCHEMES)
    if config.workers == 1:
        pairs = [_run_scheme(config, s, out, data, not args.quiet) for s in schemes]
    else:
        pairs = Parallel(n_jobs=config.workers)(delayed(_run_scheme)(config, s, out, data, False) for s in schemes)
    path = write_summary(dict(pairs), out, config.target_accuracy, args.task)
    print(path.read_text())
    return 2 if any(result.aborted is not None for _, result in pairs) else 0


def cmd_ber_table(args) -> int:
    if args.linear:
        grid = np.geomspace(args.min, args.max, args.points)
    else:
        grid = 10.0 ** (np.linspace(args.min, args.max, args.points) / 10.0)
    levels = [int(m) for m in args.levels]
    table = ber_table(grid, levels)
    print(table.to_string(index=False))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = Path(args.out) / "ber_table.csv"
        table.to_csv(path, index=False)
        logging.info(f"BER table saved to {path}")
    return 0


def cmd_importance(args) -> int:
    config = _config_from_args(args)
    data = prepare_data(config)
    state = init_state(config, data)
    for _ in range(args.warmup_rounds):
        run_round(state, config)
    batch = take(data.shards[0], config.importance_batch, config.seed, Purpose.HESSIAN)
    importance = layer_importance(
        state.model, batch, config.seed, state.round_index, config.power_tol, config.power_max_iters, config.workers
    )
    schema = state.model.schema
    report = pd.DataFrame(
        {
            "layer": schema.names,
            "D_k": schema.sizes,
            "eigenvalue": importance.eigenvalues,
            "weight": importance.weights,
            "converged": importance.converged,
        }
    )
    print(report.to_string(index=False))
    print(f"HVP calls: {importance.hvp_calls} ({importance.gradient_evaluations} extra gradient evaluations)")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = Path(args.out) / "importance.csv"
        report.to_csv(path, index=False)
        logging.info(f"Importance report saved to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Wireless federated learning with layer-wise adaptive modulation.")
    parser.add_argument("--verbose", action="store_true", help="log per-client plan details")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p, scheme=True):
        p.add_argument("--config", type=str, default=None, help="YAML experiment config (defaults if omitted)")
        p.add_argument("--out", type=str, default="results", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--rounds", type=int, default=None, help="override the number of rounds")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers (ignored in deterministic mode)")
        p.add_argument("--deterministic", action="store_true", help="force single-threaded deterministic mode")
        p.add_argument("--quiet", action="store_true", help="no progress bar")
        if scheme:
            p.add_argument(
                "--scheme", type=str, default=None, help="layerwise, am, fixed<M> or grouped<g> (overrides config)"
            )

    run = sub.add_parser("run", help="run one experiment")
    experiment_flags(run)
    run.set_defaults(handler=cmd_run)

    compare = sub.add_parser("compare", help="run every scheme on shared seeds and write the summary table")
    experiment_flags(compare, scheme=False)
    compare.add_argument("--schemes", nargs="+", default=None, help=f"schemes to compare (default {' '.join(COMPARE_SCHEMES)})")
    compare.add_argument("--task", type=str, default="Task", help="column label of the summary table")
    compare.set_defaults(handler=cmd_compare)

    table = sub.add_parser("ber-table", help="dump the M-PSK bit error rate over an Es/N0 grid")
    table.add_argument("--min", type=float, default=-10.0, help="grid start (dB, or linear with --linear)")
    table.add_argument("--max", type=float, default=30.0, help="grid end (dB, or linear with --linear)")
    table.add_argument("--points", type=int, default=41)
    table.add_argument("--linear", action="store_true", help="grid bounds are linear Es/N0 values, log-spaced")
    table.add_argument("--levels", nargs="+", default=["2", "4", "8", "16"])
    table.add_argument("--out", type=str, default=None, help="directory for ber_table.csv")
    table.set_defaults(handler=cmd_ber_table)

    importance = sub.add_parser("importance", help="report per-layer Hessian importance")
    experiment_flags(importance)
    importance.add_argument("--warmup-rounds", type=int, default=0, help="FedAvg rounds to run before estimating")
    importance.set_defaults(handler=cmd_importance)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as e:
        logging.error(f"Configuration error: {str(e)}")
        return 1
    except Exception as e:
        logging.error(f"Run failed: {str(e)}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
