"""Command-line entry point: ``afttest {fit,test,plot,simulate,export-pbc}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shlex
import sys

from . import __version__
from .data import BINARY, CONTINUOUS, ingest_table, load_pbc, read_table, write_table
from .errors import (
    AftTestError,
    BinaryCovariateForCovform,
    DataError,
    FormulaError,
    IndexOutOfRange,
    NotAfttestResult,
    QuantileCountNotFive,
    UnknownCovariate,
)
from .estimation import EQ_TYPES, EST_METHODS, fit
from .formula import parse_formula
from .gof import MULTIPLIERS, PLUGIN_MODES, TEST_TYPES, TestType, default_workers, run_afttest
from .report import ResultDocument, emit_plot, parse_quantiles
from .simulate import ERROR_DISTS, MISSPECS, SimConfig, rejection_rate

log = logging.getLogger("afttest")

# input problems reported with the usage exit status
_USAGE_ERRORS = (DataError, FormulaError, UnknownCovariate, IndexOutOfRange,
                 BinaryCovariateForCovform, QuantileCountNotFive, NotAfttestResult,
                 FileNotFoundError, IsADirectoryError, ValueError)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "t", "1", "yes"):
        return True
    if low in ("false", "f", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--formula", required=True, help='e.g. "Surv(time, status) ~ x1 + log(x2)"')
    p.add_argument("--est-method", choices=EST_METHODS, default="rr")
    p.add_argument("--eq-type", choices=EQ_TYPES, default="ns")
    p.add_argument("--binary", action="append", default=[], metavar="NAME",
                   help="force a covariate to be treated as binary (repeatable)")
    p.add_argument("--continuous", action="append", default=[], metavar="NAME",
                   help="force a covariate to be treated as continuous (repeatable)")
    p.add_argument("--no-standardize", action="store_true",
                   help="fit on raw covariates instead of centred and scaled ones")


def _add_resampling_args(p: argparse.ArgumentParser):
    p.add_argument("--multipliers", choices=tuple(MULTIPLIERS), default="poisson",
                   help="law of the positive resampling weights")
    p.add_argument("--plugin", choices=PLUGIN_MODES, default="regression",
                   help="estimation term of each path: regression slope on the "
                        "perturbed coefficients, or full recomputation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afttest", description="Goodness-of-fit tests for semiparametric AFT models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate regression coefficients")
    _add_model_args(p)

    p = sub.add_parser("test", help="run a goodness-of-fit test")
    _add_model_args(p)
    p.add_argument("--test-type", choices=TEST_TYPES, default="omnibus")
    p.add_argument("--cov-tested", default="1", help="covariate name or 1-based index")
    p.add_argument("--npath", type=_positive_int, default=200)
    p.add_argument("--npathsave", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: $AFTTEST_THREADS or 1)")
    _add_resampling_args(p)
    p.add_argument("--out", required=True, help="result JSON path")

    p = sub.add_parser("plot", help="plot a stored test result")
    p.add_argument("result", help="result JSON written by 'test'")
    p.add_argument("--npath", type=int, default=50)
    p.add_argument("--std", type=_bool, default=True)
    p.add_argument("--quantiles", default=None, help="five percentages, e.g. 10,25,50,75,90")
    p.add_argument("--out", required=True, help="SVG path; the CSV goes next to it")

    p = sub.add_parser("simulate", help="empirical size or power on synthetic data")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--beta0", type=_floats, default=(1.0, 1.0))
    p.add_argument("--error-dist", choices=ERROR_DISTS, default="normal")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--censor-rate", type=float, default=0.3)
    p.add_argument("--misspec", choices=MISSPECS, default="none")
    p.add_argument("--misspec-cov", type=int, default=1)
    p.add_argument("--misspec-a", type=float, default=0.0)
    p.add_argument("--replications", type=_positive_int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--npath", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--est-method", choices=EST_METHODS, default="rr")
    p.add_argument("--eq-type", choices=EQ_TYPES, default="ns")
    p.add_argument("--tests", default="omnibus,covform",
                   help="comma-separated subset of omnibus,link,covform")
    p.add_argument("--cov-tested", type=int, default=1)
    _add_resampling_args(p)
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("export-pbc", help="write the bundled PBC table, recoded, as CSV")
    p.add_argument("out")
    return parser


def _load(args):
    spec = parse_formula(args.formula)
    kinds = {name: BINARY for name in args.binary}
    kinds.update({name: CONTINUOUS for name in args.continuous})
    d = ingest_table(read_table(args.data), spec, kinds=kinds,
                     standardize=not args.no_standardize)
    return spec, d


def _canonical_call(args, skip=("threads", "out", "verbose", "command")) -> str:
    """Echo of the invocation without options that do not affect results."""
    parts = ["afttest", args.command]
    for key, value in sorted(vars(args).items()):
        if key in skip or value in (None, False, []):
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            parts.append(flag)
        elif isinstance(value, list):
            for v in value:
                parts += [flag, str(v)]
        else:
            parts += [flag, str(value)]
    return shlex.join(parts)


def cmd_fit(args) -> int:
    spec, d = _load(args)
    res = fit(d, args.est_method, args.eq_type)
    out = {
        "names": list(d.names),
        "beta": res.beta.tolist(),
        "beta_original": res.beta_original.tolist(),
        "estMethod": res.est_method,
        "eqType": res.eq_type,
        "converged": bool(res.converged),
        "nonsmooth_accepted": bool(res.nonsmooth_accepted),
        "n": d.n,
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_test(args) -> int:
    spec, d = _load(args)
    workers = args.threads or default_workers()
    r = run_afttest(d, args.test_type, args.est_method, args.eq_type, args.cov_tested,
                    npath=args.npath, npathsave=args.npathsave, seed=args.seed,
                    spec=spec, workers=workers, multipliers=args.multipliers,
                    plugin=args.plugin)
    doc = ResultDocument.from_result(r, call=_canonical_call(args))
    doc.save(args.out)
    print(json.dumps({"p_value": doc.p_value, "p_std_value": doc.p_std_value,
                      "npath": doc.npath, "npath_effective": doc.npath_effective}))
    return 0


def cmd_plot(args) -> int:
    doc = ResultDocument.load(args.result)
    quantiles = parse_quantiles(args.quantiles)
    csv_path = emit_plot(doc, args.out, npath=args.npath, std=args.std, quantiles=quantiles)
    print(f"wrote {args.out} and {csv_path}")
    return 0


def cmd_simulate(args) -> int:
    kinds = [s.strip() for s in args.tests.split(",") if s.strip()]
    for k in kinds:
        if k not in TEST_TYPES:
            raise ValueError(f"unknown test type {k!r}")
    tests = [TestType(k, args.cov_tested if k == "covform" else None) for k in kinds]
    cfg = SimConfig(n=args.n, beta0=args.beta0, error_dist=args.error_dist,
                    sigma=args.sigma, censor_rate=args.censor_rate, misspec=args.misspec,
                    misspec_cov=args.misspec_cov, misspec_a=args.misspec_a,
                    replications=args.replications, alpha=args.alpha, npath=args.npath,
                    seed=args.seed, est_method=args.est_method, eq_type=args.eq_type,
                    multipliers=args.multipliers, plugin=args.plugin)
    results = rejection_rate(cfg, tests, workers=args.threads or default_workers())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["test", "cov_tested", "n", "misspec", "misspec_a", "error_dist",
                "replications", "failures", "alpha", "npath", "seed",
                "achieved_censoring", "rate", "rate_std"])
    for r in results:
        w.writerow([r.test.kind, r.test.cov_index or "", cfg.n, cfg.misspec, cfg.misspec_a,
                    cfg.error_dist, cfg.replications, r.failures, cfg.alpha, cfg.npath,
                    cfg.seed, repr(r.achieved_censoring), repr(r.rate), repr(r.rate_std)])
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_export_pbc(args) -> int:
    write_table(load_pbc(), args.out)
    return 0


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "plot": cmd_plot,
            "simulate": cmd_simulate, "export-pbc": cmd_export_pbc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NotAfttestResult as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except _USAGE_ERRORS as exc:
        print(f"afttest {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except AftTestError as exc:
        print(f"afttest {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
