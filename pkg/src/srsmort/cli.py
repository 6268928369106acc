"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Failures print a JSON error record on stderr (and to ``error.json`` in the
output directory when one was given).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gmrf
from .data import DataError, load_dataset
from .diagnostics import (
    GROUPINGS,
    csmf_from_draws,
    fit_residuals,
    grouped_residuals,
    holdout_evaluate,
    information_criteria,
)
from .engine import QUANTILES, InferenceError, LatentGaussianModel, fit, predict_log_rates
from .io import CorruptFitError, cell_labels, load_fit, quantile_header, versions, write_csv, write_fit
from .mcmc import MCMCError
from .modelspec import CONFIG_DIR, SpecError, load_spec, spec_to_toml
from .sim import SCENARIO2_RHO, SCENARIO2_SIGMA2, ScenarioConfig, run_experiment, write_report

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
DEFAULT_SPEC = CONFIG_DIR / "mchss.toml"

log = logging.getLogger("srsmort")


def _rho(text):
    v = float(text)
    if not -1.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"rho must lie strictly between -1 and 1, got {text}")
    return v


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {text}")
    return v


def _model_flags(p):
    p.add_argument("--data", required=True, help="tabulated data CSV")
    p.add_argument("--spec", default=str(DEFAULT_SPEC), help="model spec TOML (default: bundled MCHSS spec)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--draws", type=_positive_int, default=1000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prior", choices=("pc", "gamma"), default=None,
                   help="variance priors: as in the model file, or Gamma(5, 0.00005) on precisions")
    p.add_argument("--strong-fixed-prior", action="store_true",
                   help="Normal(0, 5) priors on non-intercept fixed effects")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srsmort", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=_positive_int, default=1, help="maximum concurrent workers")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the unified model and write a fit directory")
    _model_flags(p)

    p = sub.add_parser("simulate", help="run a simulation scenario")
    p.add_argument("--scenario", choices=("1", "2"), required=True)
    p.add_argument("--replicates", type=_positive_int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--draws", type=_positive_int, default=1000)
    p.add_argument("--exposure", type=_positive, action="append",
                   help="exposure per stratum (repeatable; scenario 1 default: 1000, 10000, 100000)")
    p.add_argument("--sigma2", type=_positive, action="append", help="scenario 2 overdispersion (repeatable)")
    p.add_argument("--rho", type=_rho, action="append", help="scenario 2 correlation (repeatable)")
    p.add_argument("--estimators", default="unified,multistage")

    p = sub.add_parser("diagnose", help="residuals, information criteria and CSMFs of a fit")
    p.add_argument("--fit", required=True, help="fit directory")
    p.add_argument("--out", default=None, help="output directory (default: the fit directory)")

    p = sub.add_parser("holdout", help="hold out one year, refit and predict it")
    _model_flags(p)
    p.add_argument("--year", default="last", help="year index or 'last'")
    return ap


# ------------------------------------------------------------- commands

def _load_model_inputs(args):
    ds = load_dataset(args.data)
    spec = load_spec(args.spec)
    if args.prior == "gamma":
        spec = spec.with_gamma_priors()
    if args.strong_fixed_prior:
        spec = spec.with_strong_fixed_priors()
    return ds, spec


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    ds, spec = _load_model_inputs(args)
    model = LatentGaussianModel.from_spec(ds, spec)
    res = fit(model, n_draws=args.draws, seed=args.seed, threads=args.threads)
    write_fit(res, args.out, {
        "command": "fit",
        "data": str(args.data),
        "spec": str(args.spec),
        "prior": args.prior or "spec",
        "strong_fixed_prior": args.strong_fixed_prior,
        "wall_seconds": time.perf_counter() - t0,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    est = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    common = dict(replicates=args.replicates, seed=args.seed, n_draws=args.draws, estimators=est)
    if args.scenario == "1":
        if args.sigma2 or args.rho:
            raise ValueError("--sigma2 and --rho apply to scenario 2 only")
        cfg = ScenarioConfig.scenario1(**common)
    else:
        cfg = ScenarioConfig.scenario2(sigma2=tuple(args.sigma2 or SCENARIO2_SIGMA2),
                                       rho=tuple(args.rho or SCENARIO2_RHO), **common)
    if args.exposure:
        cfg = dataclasses.replace(cfg, exposures=tuple(args.exposure))
    report = run_experiment(cfg, threads=args.threads)
    report.provenance["versions"] = versions()
    report.provenance["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    write_report(report, args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    res = load_fit(args.fit)
    out = Path(args.out or args.fit)
    out.mkdir(parents=True, exist_ok=True)
    ds = res.model.dataset
    table = fit_residuals(res)
    labels = cell_labels(ds, table.cells)
    write_csv(out / "residuals.csv", ["region", "age", "year", "cause", "deaths", "expected", "residual"],
              [[*labels[i], int(table.deaths[i]), table.expected[i], table.residuals[i]]
               for i in range(len(table.cells))])
    rows = grouped_residuals(table, GROUPINGS)
    write_csv(out / "residual_groups.csv", ["grouping", "level", "n", "mean", "var"],
              [[r["grouping"], "/".join(map(str, r["level"])), r["n"], r["mean"], r["var"]] for r in rows])
    ic = information_criteria(res)
    flag = f"unstable_cpo={ic.n_unstable}" if ic.n_unstable else ""
    write_csv(out / "ic.csv", ["criterion", "value", "flags"], [
        ["DIC", ic.dic, ""], ["pD", ic.p_dic, ""], ["WAIC", ic.waic, ""], ["pWAIC", ic.p_waic, ""],
        ["neg_sum_log_cpo", ic.neg_sum_log_cpo, flag],
    ])
    pred = predict_log_rates(res, include_epsilon=False, probs=(0.5,))
    lr = pred.draws.reshape((pred.draws.shape[0],) + ds.dims)
    cs = csmf_from_draws(lr, QUANTILES)
    cells = np.arange(ds.n_cells)
    labels = cell_labels(ds, cells)
    q = cs.quantiles.reshape(len(QUANTILES), -1)
    write_csv(out / "csmf.csv", ["region", "age", "year", "cause", *quantile_header(QUANTILES)],
              [[*labels[i], *q[:, i]] for i in cells])
    return EXIT_OK


def cmd_holdout(args) -> int:
    ds, spec = _load_model_inputs(args)
    T = ds.dims[2]
    if args.year == "last":
        year = T - 1
    else:
        try:
            year = int(args.year)
        except ValueError:
            raise ValueError(f"--year must be an integer index or 'last', got {args.year!r}") from None
    ho = holdout_evaluate(ds, spec, year, n_draws=args.draws, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = cell_labels(ds, ho.cells)
    write_csv(out / "holdout.csv",
              ["region", "age", "year", "cause", "deaths", "exposure", "observed_log_rate", "defined",
               *quantile_header(ho.probs), "count_lo", "count_hi"],
              [[*labels[i], int(ho.deaths[i]), ho.exposure[i], ho.observed[i] if ho.defined[i] else "",
                int(ho.defined[i]), *ho.quantiles[:, i], ho.count_interval[0, i], ho.count_interval[1, i]]
               for i in range(len(ho.cells))])
    write_csv(out / "holdout_summary.csv", ["metric", "value"], [
        ["year_index", year], ["cells", len(ho.cells)], ["defined_cells", int(ho.defined.sum())],
        ["coverage_observed_log_rate", ho.coverage()], ["mean_abs_error", ho.mean_abs_error()],
        ["count_coverage", ho.count_coverage()],
    ])
    (out / "spec.toml").write_text(spec_to_toml(spec))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "diagnose": cmd_diagnose, "holdout": cmd_holdout}


def _classify(exc) -> int:
    if isinstance(exc, (CorruptFitError, FileNotFoundError, PermissionError, IsADirectoryError)):
        return EXIT_IO
    if isinstance(exc, (DataError, SpecError, ValueError)):
        return EXIT_VALIDATION
    if isinstance(exc, (InferenceError, MCMCError, gmrf.NotPositiveDefiniteError, np.linalg.LinAlgError,
                        FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes, unknown errors re-raised
        code = _classify(exc)
        record = {"command": args.command, "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                (Path(out) / "error.json").write_text(json.dumps(record, indent=2) + "\n")
            except OSError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
