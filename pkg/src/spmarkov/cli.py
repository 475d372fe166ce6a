"""Command line interface: simulate | fit | benchmark | surface.

Exit codes: 0 success, 1 usage/validation/configuration problems, 2 file
I/O problems, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import io
from .benchmark import RunConfig, default_workers, run_benchmark
from .em import EMConfig, VARIANTS, align_labels, run_em
from .exceptions import DataValidationError, NumericalError, SpmarkovError
from .model import TimeSeriesDataset
from .simulate import (
    TRUTHS,
    classification_accuracy,
    heldout_loglik,
    mean_abs_timing_error,
    simulate_dataset,
)

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; we reserve 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config_file(path) -> dict[str, str]:
    """Key = value lines (# comments allowed) used as argument defaults."""
    out = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataValidationError(
                    f"{path}: line {line_no}: expected 'key = value'"
                )
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _all_actions(parser: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    """dest -> action over the parser and every subparser."""
    out = {}
    stack = [parser]
    while stack:
        current = stack.pop()
        for action in current._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            elif action.dest != argparse.SUPPRESS:
                out.setdefault(action.dest, action)
    return out


def _apply_config_file(
    parser: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace
) -> None:
    """Fill parsed args with config-file values for flags not given on argv.

    Values are coerced with the matching option's type converter, so config
    files and command line flags behave identically; explicit flags win.
    """
    if getattr(args, "config", None) is None:
        return
    explicit = {token.split("=", 1)[0] for token in argv if token.startswith("--")}
    actions = _all_actions(parser)
    for key, value in _read_config_file(args.config).items():
        action = actions.get(key)
        if action is None or not action.option_strings:
            raise DataValidationError(f"unknown config key {key!r}")
        if not hasattr(args, key):
            continue  # option belongs to a different subcommand
        if explicit & set(action.option_strings):
            continue
        if callable(action.type):
            value = action.type(value)
        setattr(args, key, value)


def _optional_float(value: str | None) -> float | None:
    return None if value in (None, "", "none") else float(value)


def _optional_int(value: str | None) -> int | None:
    return None if value in (None, "", "none") else int(value)


def _add_common_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default="spline", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-basis", type=int, default=8, help="spline functions per covariate")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--kernel-family", default="squared-exponential")
    p.add_argument("--bandwidth", default=None, help="kernel length-scale (default: median heuristic)")
    p.add_argument("--nystrom-landmarks", default=None, help="low-rank Gram approximation size")
    p.add_argument("--config", default=None, help="file with 'key = value' defaults")


def build_parser() -> _Parser:
    parser = _Parser(prog="spmarkov", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_sim = sub.add_parser("simulate", help="draw a synthetic series")
    p_sim.add_argument("--n-obs", type=int, default=1000)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--truth", default="nonlinear", choices=sorted(TRUTHS))
    p_sim.add_argument("--data", required=True, help="output dataset CSV")
    p_sim.add_argument("--states", default=None, help="output true-state CSV")
    p_sim.add_argument("--config", default=None)

    p_fit = sub.add_parser("fit", help="fit one model to a dataset CSV")
    p_fit.add_argument("--data", required=True, help="input dataset CSV")
    p_fit.add_argument("--model-out", default=None, help="write fitted parameters here")
    p_fit.add_argument("--posterior-out", default=None, help="write smoothed posteriors here")
    p_fit.add_argument("--truth-states", default=None, help="true-state CSV for metrics")
    p_fit.add_argument("--holdout", type=int, default=0, help="score the last N points out of sample")
    _add_common_fit_options(p_fit)

    p_bench = sub.add_parser("benchmark", help="Monte Carlo variant comparison")
    p_bench.add_argument("--n-reps", type=int, default=20)
    p_bench.add_argument("--n-obs", type=int, default=1000)
    p_bench.add_argument("--holdout", type=int, default=200)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--truth", default="nonlinear", choices=sorted(TRUTHS))
    p_bench.add_argument(
        "--variants",
        default="linear-logit,linear-probit,spline,rkhs",
        help="comma-separated variant list",
    )
    p_bench.add_argument("--workers", default=None, help="default: SPMARKOV_WORKERS or 1")
    p_bench.add_argument("--out", required=True, help="per-replication CSV")
    p_bench.add_argument("--summary-out", default=None, help="per-variant median CSV")
    p_bench.add_argument("--max-iter", type=int, default=500)
    p_bench.add_argument("--tol", type=float, default=1e-6)
    p_bench.add_argument("--n-basis", type=int, default=8)
    p_bench.add_argument("--degree", type=int, default=3)
    p_bench.add_argument("--kernel-family", default="squared-exponential")
    p_bench.add_argument("--bandwidth", default=None)
    p_bench.add_argument("--nystrom-landmarks", default=None)
    p_bench.add_argument("--config", default=None)

    p_surf = sub.add_parser("surface", help="tabulate fitted transition surfaces")
    p_surf.add_argument("--model", required=True, help="model file from fit --model-out")
    p_surf.add_argument("--grid", type=int, default=50, help="grid points per axis")
    p_surf.add_argument("--out", required=True, help="output CSV")
    p_surf.add_argument("--config", default=None)
    return parser


def cmd_simulate(args) -> int:
    data, truth = simulate_dataset(args.n_obs, args.seed, args.truth)
    io.write_dataset_csv(args.data, data)
    if args.states is not None:
        io.write_states_csv(args.states, truth.states)
    occupancy = float(np.mean(truth.states))
    print(
        f"simulated {args.n_obs} points (truth={args.truth}, seed={args.seed}); "
        f"regime-1 occupancy {occupancy:.3f}"
    )
    return 0


def cmd_fit(args) -> int:
    data = io.read_dataset_csv(args.data)
    holdout = args.holdout
    if holdout < 0 or (holdout > 0 and data.n_obs - holdout < 10):
        raise DataValidationError(
            f"holdout {holdout} leaves too little training data (T={data.n_obs})"
        )
    train = data.window(0, data.n_obs - holdout) if holdout else data
    config = EMConfig(
        variant=args.variant,
        max_iter=args.max_iter,
        tol=args.tol,
        seed=args.seed,
        n_basis=args.n_basis,
        degree=args.degree,
        kernel_family=args.kernel_family,
        bandwidth=_optional_float(args.bandwidth),
        nystrom_landmarks=_optional_int(args.nystrom_landmarks),
    )
    started = time.perf_counter()
    result = run_em(train, config)
    seconds = time.perf_counter() - started
    params, post = result.params, result.posterior
    print(
        f"fit variant={config.variant} T={train.n_obs}: loglik {result.loglik:.6f} "
        f"after {result.n_iter} iterations "
        f"({'converged' if result.converged else 'iteration limit'}, "
        f"{result.n_rollbacks} rollbacks, {seconds:.1f}s)"
    )
    if result.lambdas is not None:
        print(f"selected smoothing: regime0 {result.lambdas[0]}, regime1 {result.lambdas[1]}")
    if args.truth_states is not None:
        states = io.read_states_csv(args.truth_states)
        if states.size != data.n_obs:
            raise DataValidationError(
                f"{args.truth_states}: {states.size} states for {data.n_obs} observations"
            )
        train_states = states[: train.n_obs]
        params, post, perm = align_labels(params, post, train_states)
        hard = np.argmax(post.z, axis=1)
        print(
            f"against truth (labels {'swapped' if perm == (1, 0) else 'kept'}): "
            f"accuracy {classification_accuracy(post, train_states):.4f}, "
            f"onset timing error {mean_abs_timing_error(hard, train_states):.3f}"
        )
    if holdout:
        hold = data.window(data.n_obs - holdout, data.n_obs)
        print(f"held-out loglik (last {holdout} points): {heldout_loglik(params, hold):.6f}")
    if args.model_out is not None:
        x_train = train.x
        io.write_model(
            args.model_out,
            params,
            config.variant,
            (x_train.min(axis=0), x_train.max(axis=0)),
        )
        print(f"model written to {args.model_out}")
    if args.posterior_out is not None:
        io.write_posterior_csv(args.posterior_out, post)
        print(f"posteriors written to {args.posterior_out}")
    return 0


def cmd_benchmark(args) -> int:
    workers = _optional_int(args.workers)
    config = RunConfig(
        n_reps=args.n_reps,
        n_obs=args.n_obs,
        holdout=args.holdout,
        seed=args.seed,
        truth=args.truth,
        variants=tuple(v.strip() for v in args.variants.split(",") if v.strip()),
        workers=workers if workers is not None else default_workers(),
        max_iter=args.max_iter,
        tol=args.tol,
        n_basis=args.n_basis,
        degree=args.degree,
        kernel_family=args.kernel_family,
        bandwidth=_optional_float(args.bandwidth),
        nystrom_landmarks=_optional_int(args.nystrom_landmarks),
    )

    def progress(rep, results):
        cells = ", ".join(f"{r.variant}: acc {r.accuracy:.3f} ({r.seconds:.0f}s)" for r in results)
        print(f"rep {rep + 1}/{config.n_reps}: {cells}", file=sys.stderr, flush=True)

    report = run_benchmark(config, progress=progress)
    report.write_csv(args.out)
    print(f"report written to {args.out}")
    if args.summary_out is not None:
        report.write_summary_csv(args.summary_out)
        print(f"summary written to {args.summary_out}")
    for variant, stats in report.summary().items():
        print(
            f"{variant}: median accuracy {stats['median_accuracy']:.4f}, "
            f"timing error {stats['median_timing_error']:.3f}, "
            f"held-out loglik {stats['median_heldout_loglik']:.2f}"
        )
    return 0


def cmd_surface(args) -> int:
    params, meta = io.read_model(args.model)
    io.write_surface_csv(args.out, params, (meta["x_min"], meta["x_max"]), args.grid)
    print(f"surface grid ({meta['variant']} fit) written to {args.out}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "benchmark": cmd_benchmark,
    "surface": cmd_surface,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(parser, argv, args)
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"spmarkov: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SpmarkovError as exc:
        print(f"spmarkov: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"spmarkov: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"spmarkov: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
