import sys
import argparse
import logging
from dataclasses import replace

import numpy as np

from Panel_Data.longitudinal_data import (DEFAULT_RESPONSE_COL, DEFAULT_SUBJECT_COL, DEFAULT_TIME_COL,
                                          load_dataset, standardize)
from PGEE.errors import DataError, NumericalError, PgeeError, SpecificationError
from PGEE.penalty import DEFAULT_SCAD_A, PENALTY_FAMILIES, PenaltySpec
from PGEE.solver import ModelSpec, SolverControl, fit_pgee
from PGEE.tuning import (DEFAULT_ALPHAS, DEFAULT_N_LAMBDA, TuningGrid, cv_then_fit, loso_cv,
                         penalization_path, select_qgcv, select_tuning)
from Reports.writers import DEFAULT_PLOT_TOP_K, FORMATS, emit, plot_path
from Simulation.metrics import bootstrap_se
from Simulation.study import PRESETS, STUDY_FAMILIES, load_design, preset, run_study

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_DATA = 3

SUBCOMMANDS = {
    "fit": "Fit a penalized GEE at given tuning parameters (or CV-tuned when --lambda is omitted)",
    "cv": "Leave-one-subject-out cross-validation over a (lambda, alpha) grid",
    "path": "Trace standardized coefficients along a descending lambda sequence",
    "simulate": "Draw one dataset from a simulation design",
    "bench": "Monte-Carlo comparison of penalty families on a simulation design",
}


class UsageError(Exception):
    pass


class ToolkitParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_seed(value):
    if value is None:
        return None
    if value == "auto":
        seed = int(np.random.SeedSequence().entropy % (2 ** 63))
        logging.warning("--seed auto resolved to %d", seed)
        return seed
    try:
        seed = int(value)
    except ValueError:
        raise UsageError(f"--seed must be a non-negative integer or 'auto', got {value!r}")
    if seed < 0:
        raise UsageError(f"--seed must be non-negative, got {seed}")
    return seed


def require_seed(args, what):
    if args.seed is None:
        raise UsageError(f"{what} draws random numbers: pass --seed N or --seed auto")
    return parse_seed(args.seed)


def parse_float_list(text, flag):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects a count or a comma-separated list of numbers, got {text!r}")


def grid_from_args(args, data, model, family):
    """Builds the tuning grid; each grid flag takes a count or a comma list."""
    alphas = DEFAULT_ALPHAS
    if args.grid_alphas:
        if "," not in args.grid_alphas and args.grid_alphas.strip().isdigit():
            k = int(args.grid_alphas)
            if k < 1:
                raise UsageError("--grid-alphas count must be at least 1")
            alphas = tuple(np.linspace(0.0, 1.0, k)) if k > 1 else (1.0,)
        else:
            alphas = tuple(parse_float_list(args.grid_alphas, "--grid-alphas"))
    n_lambda = args.n_lambda
    if args.grid_lambdas:
        if "," not in args.grid_lambdas and args.grid_lambdas.strip().isdigit():
            n_lambda = int(args.grid_lambdas)
        else:
            values = sorted(parse_float_list(args.grid_lambdas, "--grid-lambdas"), reverse=True)
            return TuningGrid(tuple(values), alphas)
    if n_lambda < 1:
        raise UsageError("the lambda grid needs at least one point")
    return TuningGrid.default(data, model, family, n_lambda, alphas)


def add_data_arguments(parser):
    parser.add_argument("--input", required=True, help="Long-format CSV file")
    parser.add_argument("--subject-col", default=DEFAULT_SUBJECT_COL)
    parser.add_argument("--time-col", default=DEFAULT_TIME_COL)
    parser.add_argument("--response-col", default=DEFAULT_RESPONSE_COL)
    parser.add_argument("--covariates", help="Comma-separated covariate columns (default: all others)")
    parser.add_argument("--family", choices=("gaussian", "binomial"), default="gaussian")
    parser.add_argument("--working", choices=("independence", "exchangeable", "ar1"), default="independence")
    parser.add_argument("--no-standardize", action="store_true",
                        help="Fit on the raw scale instead of standardized columns")


def add_grid_arguments(parser):
    parser.add_argument("--grid-lambdas", help="Lambda count (log grid) or comma list")
    parser.add_argument("--grid-alphas", help="Alpha count (evenly spaced on [0, 1]) or comma list")
    parser.add_argument("--n-lambda", type=int, default=DEFAULT_N_LAMBDA)
    parser.add_argument("--rule", choices=("min", "one-se"), default="min")


def add_output_arguments(parser, formats=FORMATS):
    parser.add_argument("--output", help="Output file (default: stdout)")
    parser.add_argument("--format", choices=formats, default=formats[0])


def build_parser():
    parser = ToolkitParser(prog="PGEE_Toolkit", description="Penalized generalized estimating equations")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ToolkitParser)

    fit = sub.add_parser("fit", help=SUBCOMMANDS["fit"])
    add_data_arguments(fit)
    fit.add_argument("--penalty", choices=PENALTY_FAMILIES, default="none")
    fit.add_argument("--lambda", dest="lam", type=float)
    fit.add_argument("--alpha", type=float)
    fit.add_argument("--lambda1", type=float)
    fit.add_argument("--lambda2", type=float)
    fit.add_argument("--a", type=float, default=DEFAULT_SCAD_A)
    fit.add_argument("--bootstrap", type=int, metavar="B", help="Cluster bootstrap SEs from B replicates")
    fit.add_argument("--seed")
    fit.add_argument("--threads", type=int, default=1)
    add_grid_arguments(fit)
    add_output_arguments(fit)

    cv = sub.add_parser("cv", help=SUBCOMMANDS["cv"])
    add_data_arguments(cv)
    cv.add_argument("--penalty", choices=PENALTY_FAMILIES[1:], default="scad_l2")
    cv.add_argument("--a", type=float, default=DEFAULT_SCAD_A)
    cv.add_argument("--threads", type=int, default=1)
    add_grid_arguments(cv)
    add_output_arguments(cv)

    path = sub.add_parser("path", help=SUBCOMMANDS["path"])
    add_data_arguments(path)
    path.add_argument("--penalty", choices=PENALTY_FAMILIES[1:], default="scad_l2")
    path.add_argument("--alpha", type=float, default=1.0)
    path.add_argument("--a", type=float, default=DEFAULT_SCAD_A)
    path.add_argument("--grid-lambdas", help="Lambda count (log grid) or comma list")
    path.add_argument("--n-lambda", type=int, default=DEFAULT_N_LAMBDA)
    path.add_argument("--plot", metavar="PATH", help="Write an SVG plot of the largest paths")
    path.add_argument("--top-k", type=int, default=DEFAULT_PLOT_TOP_K)
    add_output_arguments(path)

    simulate = sub.add_parser("simulate", help=SUBCOMMANDS["simulate"])
    simulate.add_argument("--design", choices=sorted(PRESETS), default="cross-sectional")
    simulate.add_argument("--config", help="JSON design file (overrides --design)")
    simulate.add_argument("--n", type=int, help="Number of subjects (default: the design's)")
    simulate.add_argument("--seed")
    add_output_arguments(simulate, ("csv", "json", "table"))

    bench = sub.add_parser("bench", help=SUBCOMMANDS["bench"])
    bench.add_argument("--design", choices=sorted(PRESETS), default="cross-sectional")
    bench.add_argument("--config", help="JSON design file (overrides --design)")
    bench.add_argument("--penalties", default=",".join(STUDY_FAMILIES),
                       help=f"Comma-separated families from {', '.join(STUDY_FAMILIES)}")
    bench.add_argument("--replicates", type=int, default=100)
    bench.add_argument("--seed")
    bench.add_argument("--threads", type=int, default=1)
    add_output_arguments(bench)
    return parser


def load_input(args):
    covariates = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    raw = load_dataset(args.input, args.subject_col, args.time_col, args.response_col, covariates)
    if args.no_standardize:
        return raw, None
    return standardize(raw, scale_response=args.family == "gaussian")


def model_from_args(args):
    return ModelSpec.for_family(args.family, args.working)


def penalty_from_args(args):
    config = {"penalty": args.penalty, "a": args.a}
    if args.lam is not None:
        config["lambda"] = args.lam
        if args.alpha is not None:
            config["alpha"] = args.alpha
    if args.lambda1 is not None:
        config["lambda1"] = args.lambda1
    if args.lambda2 is not None:
        config["lambda2"] = args.lambda2
    return PenaltySpec.from_config(config)


def rule_of(args):
    return args.rule.replace("-", "_")


def cmd_fit(args):
    data, scaling = load_input(args)
    model = model_from_args(args)
    control = SolverControl(check_scaling=not args.no_standardize)
    tuned = args.penalty != "none" and args.lam is None and args.lambda1 is None and args.lambda2 is None
    if tuned:
        grid = grid_from_args(args, data, model, args.penalty)
        _, penalty, fit = cv_then_fit(data, model, args.penalty, grid, rule_of(args), control,
                                      args.threads, args.a)
    else:
        penalty = penalty_from_args(args)
        fit = fit_pgee(data, model, penalty, control)
    document = fit.to_dict(data.covariate_names, scaling)
    document["tuned_by_cv"] = tuned
    if scaling is not None:
        document["scaling"] = scaling.to_dict()
    rows = [
        {"covariate": name, "naive": fit.beta_naive[j], "nonnaive": fit.beta_nonnaive[j]}
        for j, name in enumerate(data.covariate_names)
    ]
    if scaling is not None:
        for row, value in zip(rows, scaling.to_original(fit.beta_nonnaive)):
            row["original_scale"] = value
    if args.bootstrap is not None:
        seed = require_seed(args, "fit --bootstrap")
        se = bootstrap_se(data, model, penalty, args.bootstrap, seed, control, args.threads)
        document["bootstrap"] = {"replicates": args.bootstrap, "seed": seed, "se": se.tolist()}
        for row, value in zip(rows, se):
            row["bootstrap_se"] = value
    emit(rows, args.format, args.output, document)


def cmd_cv(args):
    data, _ = load_input(args)
    model = model_from_args(args)
    grid = grid_from_args(args, data, model, args.penalty)
    surface = loso_cv(data, model, args.penalty, grid, SolverControl(check_scaling=False),
                      args.threads, args.a, with_qgcv=True)
    rows = surface.to_rows()
    chosen = {}
    for rule in ("min", "one_se"):
        lam, alpha = select_tuning(surface, rule)
        chosen[rule] = {"lambda": lam, "alpha": alpha}
    if surface.has_qgcv:
        lam, alpha = select_qgcv(surface)
        chosen["qgcv"] = {"lambda": lam, "alpha": alpha}
    document = {"penalty": args.penalty, "model": model.to_config(), "points": rows, "chosen": chosen}
    emit(rows, args.format, args.output, document)
    if args.format == "table" and args.output is None:
        for rule, point in chosen.items():
            print(f"{rule}: lambda={point['lambda']:.6g} alpha={point['alpha']:.6g}")


def cmd_path(args):
    data, _ = load_input(args)
    model = model_from_args(args)
    lambdas, n_lambda = None, args.n_lambda
    if args.grid_lambdas and args.grid_lambdas.strip().isdigit():
        n_lambda = int(args.grid_lambdas)
    elif args.grid_lambdas:
        lambdas = sorted(parse_float_list(args.grid_lambdas, "--grid-lambdas"), reverse=True)
    if n_lambda < 1:
        raise UsageError("the lambda grid needs at least one point")
    result = penalization_path(data, model, args.penalty, args.alpha, lambdas,
                               SolverControl(check_scaling=False), args.a, n_lambda)
    rows = result.to_rows()
    document = {
        "penalty": args.penalty,
        "alpha": result.alpha,
        "model": model.to_config(),
        "covariates": list(data.covariate_names),
        "lambdas": result.lambdas.tolist(),
        "coefficients": result.coefficients.tolist(),
        "valid": result.valid.tolist(),
        "top_k": [data.covariate_names[j] for j in result.top_k(args.top_k)],
    }
    emit(rows, args.format, args.output, document)
    if args.plot:
        plot_path(result, args.plot, args.top_k)


def design_from_args(args):
    return load_design(args.config) if args.config else preset(args.design)


def cmd_simulate(args):
    seed = require_seed(args, "simulate")
    design = design_from_args(args)
    if args.n is not None:
        design = replace(design, generator=design.generator.with_n(args.n))
    data = design.simulate(seed)
    frame = data.to_frame()
    emit(frame.to_dict("records"), args.format, args.output)


def cmd_bench(args):
    seed = require_seed(args, "bench")
    design = design_from_args(args)
    penalties = [p.strip() for p in args.penalties.split(",") if p.strip()]
    report = run_study(design, penalties, args.replicates, SolverControl(check_scaling=False), seed,
                       args.threads)
    emit(report.to_rows(), args.format, args.output, report.to_dict())


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "path": cmd_path,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def run(argv=None):
    """Runs one subcommand and returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    if getattr(args, "threads", 1) < 1:
        print("usage error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SpecificationError as e:
        print(f"invalid specification: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PgeeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
