"""Command-line interface: ``clssem {estimate,simulate,replicate,permtest}``.

Exit codes: 0 success (converged), 2 result produced but the optimizer did
not converge, 1 error (bad input, usage, failed estimation).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .estimator import RESULT_SCHEMA, STRATEGIES, EstimationError, estimate
from .fit import DF_MODES, FitReport, chi_square_fit, permutation_null_fit, residual_mean_R
from .model import DataError, Dataset, ModelError, load_model, read_csv
from .optimizer import OptimizerConfig
from .simgen import STUDIES, get_study
from .studies import replicate

logger = logging.getLogger("clssem")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

DEFAULTS = {
    "seed": 0, "multistart": 5, "max_iter": 2000, "gtol": 1e-8, "penalty": None,
    "jobs": None, "perms": 20, "reps": 25, "n": 100, "wa_budget": 60,
    "ww_iterations": 1, "wo_penalty": None, "chi_square": None,
}
_INT_KEYS = {"seed", "multistart", "max_iter", "perms", "reps", "n", "wa_budget",
             "ww_iterations", "jobs"}
_FLOAT_KEYS = {"gtol", "penalty", "wo_penalty"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys map to
    underscores.  Keys are the long flag names, e.g. ``max-iter = 500``."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
        out[key] = value
    return out


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from the defaults."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is None:
            if key in config:
                setattr(args, key, config[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    if getattr(args, "jobs", 0) is None:
        args.jobs = os.cpu_count() or 1
    return args


def _cfg(args) -> OptimizerConfig:
    return OptimizerConfig(max_iter=args.max_iter, gtol=args.gtol,
                           multistart=args.multistart, seed=args.seed)


def _options(args) -> dict:
    return {"ww_iterations": args.ww_iterations, "wo_penalty": args.wo_penalty,
            "wa_budget": args.wa_budget}


def _add_common(p):
    p.add_argument("--config", help="key=value file with defaults for any flag")
    p.add_argument("--seed", type=int)
    p.add_argument("--multistart", type=int, help="local searches per fit")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--gtol", type=float)
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit_inputs(p):
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--penalty", type=float, help="soft-constraint penalty P")
    p.add_argument("--ww-iterations", dest="ww_iterations", type=int)
    p.add_argument("--wo-penalty", dest="wo_penalty", type=float)
    p.add_argument("--wa-budget", dest="wa_budget", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clssem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="fit a model to a CSV data set")
    _add_fit_inputs(p)
    _add_common(p)
    p.add_argument("--out", help="result JSON path")
    p.add_argument("--scores", help="latent score CSV path")
    p.add_argument("--chi-square", dest="chi_square", choices=DF_MODES,
                   help="add a chi-square statistic (experimental df)")
    p.add_argument("--no-uniqueness", dest="uniqueness", action="store_false",
                   help="skip the Hessian check")

    p = sub.add_parser("simulate", help="generate a data set for a study")
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--out", required=True, help="data CSV path")
    p.add_argument("--truth", help="truth JSON path")
    p.add_argument("--model-out", dest="model_out", help="write the study's model file")
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("replicate", help="Monte-Carlo replication of a study")
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--strategies", default="w1",
                   help="comma-separated list from " + ",".join(STRATEGIES))
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--csv", help="machine-readable table path")
    p.add_argument("--ww-iterations", dest="ww_iterations", type=int)
    p.add_argument("--wo-penalty", dest="wo_penalty", type=float)
    p.add_argument("--wa-budget", dest="wa_budget", type=int)
    _add_common(p)

    p = sub.add_parser("permtest", help="compare F_min with column-permuted data")
    _add_fit_inputs(p)
    _add_common(p)
    p.add_argument("--perms", type=int)
    p.add_argument("--identity", action="store_true",
                   help="skip shuffling (reproduces the original F_min)")
    p.add_argument("--out", help="fit report JSON path")
    return parser


def _params(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--param {k}: not a number: {v!r}") from None
    return out


def _normalize_note(model) -> None:
    for c in model.constraints:
        if c.kind == "normalize":
            print(f"note: normalize({c.args[0]}) scales the scores to mean square 1 "
                  f"(sum of squares = n), mode {c.mode}")


def _load(args):
    model = load_model(args.model)
    data = read_csv(args.data)
    return model, data


def cmd_estimate(args) -> int:
    model, data = _load(args)
    _normalize_note(model)
    res = estimate(model, data, args.strategy, _cfg(args), penalty=args.penalty,
                   check_uniqueness=args.uniqueness, **_options(args))
    if args.chi_square:
        res.fit["chi_square"] = chi_square_fit(res, args.chi_square).as_dict()
    doc = res.to_dict()
    _validate(doc)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
    if args.scores:
        Dataset(tuple(model.latent), res.latent_scores).to_csv(args.scores)
    print(f"strategy {args.strategy}  n={data.n}  F_min={res.f_min:.6g}  "
          f"R={res.fit['R']:.6g}  converged={res.converged}  uniqueness={res.uniqueness}")
    width = max(map(len, res.params), default=0)
    for name, value in res.params.items():
        print(f"  {name:<{width}}  {value: .6f}")
    if "chi_square" in res.fit:
        c = res.fit["chi_square"]
        print(f"chi-square ({c['df_mode']}, experimental): {c['statistic']:.3f} "
              f"df={c['df']} p={c['p_value']:.4g}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _validate(doc: dict) -> None:
    try:
        import jsonschema
    except ImportError:  # validation is a development aid
        return
    jsonschema.validate(doc, RESULT_SCHEMA)


def cmd_simulate(args) -> int:
    study = get_study(args.study)
    data, truth = study.generate(args.n, args.seed, _params(args.param))
    data.to_csv(args.out)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth.as_dict(), indent=2))
    if args.model_out:
        Path(args.model_out).write_text(study.model_text)
    print(f"wrote {data.n} cases of study {study.tag} to {args.out}")
    return EXIT_OK


def cmd_replicate(args) -> int:
    strategies = [s.strip().lower() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise UsageError(f"unknown strategies: {', '.join(bad) or '(none)'}")
    rep = replicate(args.study, args.n, args.reps, strategies, args.seed, _cfg(args),
                    params=_params(args.param) or None, jobs=args.jobs, **_options(args))
    print(rep.table())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return EXIT_OK


def cmd_permtest(args) -> int:
    model, data = _load(args)
    _normalize_note(model)
    cfg = _cfg(args)
    res = estimate(model, data, args.strategy, cfg, penalty=args.penalty,
                   check_uniqueness=False, **_options(args))
    report = FitReport(residual_mean_R(res.f_unweighted, data.n, model.m), res.f_min)
    print(f"original F_min={res.f_min:.6g}  R={report.R:.6g}")
    if args.perms > 0:
        report.null = permutation_null_fit(model, data, args.strategy, cfg, args.perms,
                                           args.seed, original=res.f_min,
                                           identity=args.identity, penalty=args.penalty,
                                           jobs=args.jobs)
        s = np.asarray(report.null.samples)
        if s.size:
            print(f"null F_min over {s.size} permutations: min={s.min():.6g} "
                  f"median={np.median(s):.6g} max={s.max():.6g}")
        print(f"fraction of null F_min below original: {report.null.fraction_below:.3f}"
              f"  (failed: {report.null.failures})")
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate,
            "replicate": cmd_replicate, "permtest": cmd_permtest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _resolve(parser.parse_args(argv))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except (ModelError, DataError, EstimationError, UsageError, KeyError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
