"""Simulation scenarios, estimator runs and interval metrics.

Seeds: every random stream is ``SeedSequence([base_seed, condition, replicate,
stream])`` with stream 0 for data generation, 1 for the unified fit and 2 for
the multistage fit, so adding or removing an estimator never changes the
generated data.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats as st
from scipy.special import gammaln, xlogy

from . import gmrf
from .data import DataError, TabulatedDataset
from .engine import InferenceError, LatentGaussianModel, fit, predict_log_rates
from .modelspec import ModelSpec, build_design
from .multistage import fit_multistage

log = logging.getLogger(__name__)

SCENARIOS = ("extra-poisson", "correlated-2cause", "custom")
ESTIMATORS = ("unified", "multistage")
SCENARIO1_EXPOSURES = (1000.0, 10000.0, 100000.0)
SCENARIO2_EXPOSURE = 8749.0
SCENARIO2_SIGMA2 = (0.01, 0.1, 1.0)
SCENARIO2_RHO = (-0.5, 0.0, 0.5)
DEFAULT_REPLICATES = 50
STREAM_DATA, STREAM_UNIFIED, STREAM_MULTISTAGE = 0, 1, 2
REPORT_COLUMNS = ("scenario", "estimator", "exposure", "sigma2", "rho", "metric", "value", "mc_se")


def stream_seed(base_seed: int, condition: int, replicate: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(condition), int(replicate), int(stream)])
               .generate_state(1)[0])


def _dataset(y, exposure):
    return TabulatedDataset(deaths=y, exposure=exposure)


# ------------------------------------------------------------- generators

def gen_scenario1(seed, exposure: float, sigma2: float = 0.2, alpha: float = -5.0, beta: float = 0.5,
                  dims=(6, 6, 20, 8)):
    """Eight causes with IID extra-Poisson variability.

    ``log lambda_hc = alpha + beta * 1[c >= 2] + eps_hc``, ``eps ~ N(0, sigma2)``,
    ``y ~ Poisson(N_h lambda)`` with a common exposure ``N_h``. Cause 1 (index 0)
    is the reference. Returns ``(dataset, true log rates)`` on the (R, A, T, C) grid.
    """
    if not exposure > 0:
        raise ValueError("exposure must be positive")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    rng = np.random.default_rng(seed)
    R, A, T, C = dims
    cause = np.where(np.arange(C) >= 1, beta, 0.0)
    eta = alpha + cause[None, None, None, :] + math.sqrt(sigma2) * rng.standard_normal(dims)
    N = np.full((R, A, T), float(exposure))
    y = rng.poisson(N[..., None] * np.exp(eta))
    return _dataset(y, N), eta


def gen_scenario2(seed, sigma2: float, rho: float, exposure: float = SCENARIO2_EXPOSURE, alpha: float = -5.0,
                  beta: float = 0.5, dims=(6, 6, 20, 2)):
    """Two causes with correlated stratum effects.

    Region, age and cause-2 effects all equal ``beta`` (first level is the
    reference); ``(eps_h1, eps_h2) ~ N_2(0, sigma2 [[1, rho], [rho, 1]])``.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if not abs(rho) < 1:
        raise ValueError("rho must lie in (-1, 1)")
    if not exposure > 0:
        raise ValueError("exposure must be positive")
    rng = np.random.default_rng(seed)
    R, A, T, C = dims
    if C != 2:
        raise ValueError("scenario 2 has exactly two causes")
    reg = np.where(np.arange(R) >= 1, beta, 0.0)
    age = np.where(np.arange(A) >= 1, beta, 0.0)
    cause = np.array([0.0, beta])
    cov = sigma2 * np.array([[1.0, rho], [rho, 1.0]])
    eps = rng.multivariate_normal(np.zeros(2), cov, size=(R, A, T))
    eta = alpha + reg[:, None, None, None] + age[None, :, None, None] + cause[None, None, None, :] + eps
    N = np.full((R, A, T), float(exposure))
    y = rng.poisson(N[..., None] * np.exp(eta))
    return _dataset(y, N), eta


@dataclass
class ModelTruth:
    """Generating values of a draw from a full model.

    :ivar smooth: log rates without overdispersion, (R, A, T, C).
    :ivar log_rate: log rates including overdispersion.
    :ivar walks: (n_walks x T) walk values.
    """

    smooth: np.ndarray
    log_rate: np.ndarray
    walks: np.ndarray
    fixed: np.ndarray
    epsilon: np.ndarray
    sigma_walk: float
    sigma_epsilon: float


def gen_from_model(seed, spec: ModelSpec, dims=(6, 6, 20, 8), intercept: float = -5.0, effect_sd: float = 0.4,
                   sigma_walk: float = 0.03, slope_sd: float = 0.03, sigma_epsilon: float = 0.02,
                   exposure_median: float = SCENARIO2_EXPOSURE, exposure_log_sd: float = 0.4):
    """Data generated from the latent Gaussian model described by ``spec``.

    Fixed effects other than the intercept are ``N(0, effect_sd^2)``. Each walk
    starts at zero with a ``N(0, slope_sd^2)`` slope and ``N(0, sigma_walk^2)``
    second differences, then is centred. Overdispersion is IID with standard
    deviation ``sigma_epsilon``. Exposures are log-normal around ``exposure_median``.
    Returns ``(dataset, ModelTruth)``.
    """
    rng = np.random.default_rng(seed)
    R, A, T, C = dims
    real = build_design(spec, dims)
    x = np.zeros(real.n_latent)
    for term, sl in real.latent_index.items():
        if term == "intercept":
            x[sl] = intercept
        elif term not in ("walks", "epsilon"):
            x[sl] = effect_sd * rng.standard_normal(sl.stop - sl.start)
    walks = np.zeros((real.n_walks, T))
    if real.n_walks:
        t = np.arange(T)
        for i in range(real.n_walks):
            incr = np.concatenate([[0.0, 0.0], sigma_walk * rng.standard_normal(T - 2)])
            w = slope_sd * rng.standard_normal() * t + np.cumsum(np.cumsum(incr))
            walks[i] = w - w.mean()
        x[real.latent_index["walks"]] = walks.ravel()
    smooth = (real.design_without_epsilon() @ x).reshape(dims)
    eps = sigma_epsilon * rng.standard_normal(dims) if spec.overdispersion != "none" else np.zeros(dims)
    log_rate = smooth + eps
    N = exposure_median * np.exp(exposure_log_sd * rng.standard_normal((R, A, T)))
    y = rng.poisson(N[..., None] * np.exp(log_rate))
    fixed = x[: real.n_fixed].copy()
    return _dataset(y, N), ModelTruth(smooth, log_rate, walks, fixed, eps, sigma_walk, sigma_epsilon)


# ------------------------------------------------------------- metrics

@dataclass
class CellMetrics:
    """Per-cell relative bias, coverage indicator and interval width.

    ``undefined`` marks cells with a zero truth, whose bias is NaN.
    """

    bias: np.ndarray
    covered: np.ndarray
    width: np.ndarray
    undefined: np.ndarray

    def means(self) -> dict:
        return {
            "bias": float(np.nanmean(self.bias)) if np.any(~self.undefined) else float("nan"),
            "coverage": float(np.mean(self.covered)),
            "width": float(np.mean(self.width)),
        }


def eval_metrics(median, lower, upper, truth) -> CellMetrics:
    """``(median - truth) / |truth|``, closed-interval coverage and ``upper - lower``."""
    median, lower, upper, truth = (np.asarray(v, dtype=float).ravel() for v in (median, lower, upper, truth))
    if not (median.shape == lower.shape == upper.shape == truth.shape):
        raise ValueError("summaries and truth must have one entry per cell")
    undefined = truth == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bias = np.where(undefined, np.nan, (median - truth) / np.abs(truth))
    covered = (lower <= truth) & (truth <= upper)
    return CellMetrics(bias, covered, upper - lower, undefined)


def multinomial_equivalence_check(y, mu):
    """Poisson likelihood of cause counts versus all-cause Poisson times multinomial.

    Returns ``(lhs, rhs, |lhs - rhs|)``.
    """
    y = np.asarray(y, dtype=np.int64)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("means must be positive")
    lhs = float(np.sum(st.poisson.logpmf(y, mu)))
    n, m = int(y.sum()), float(mu.sum())
    # multinomial term written out: scipy re-derives the last probability as 1 - sum(others)
    log_multi = gammaln(n + 1) - float(np.sum(gammaln(y + 1))) + float(np.sum(xlogy(y, mu / m)))
    rhs = float(st.poisson.logpmf(n, m) + log_multi)
    return lhs, rhs, abs(lhs - rhs)


# ------------------------------------------------------------- experiments

@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation design.

    Conditions are the product of ``exposures``, ``sigma2`` and ``rho``
    (``rho`` is ignored for the IID scenarios).
    """

    scenario: str = "extra-poisson"
    dims: tuple = (6, 6, 20, 8)
    exposures: tuple = SCENARIO1_EXPOSURES
    sigma2: tuple = (0.2,)
    rho: tuple = (0.0,)
    alpha: float = -5.0
    beta: float = 0.5
    replicates: int = DEFAULT_REPLICATES
    seed: int = 0
    estimators: tuple = ESTIMATORS
    n_draws: int = 1000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.replicates < 1:
            raise ValueError("replicate count must be at least 1")
        if self.n_draws < 2:
            raise ValueError("at least 2 posterior draws are needed for intervals")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValueError(f"unknown estimator {e!r}")
        if any(not n > 0 for n in self.exposures):
            raise ValueError("exposures must be positive")
        if self.scenario == "correlated-2cause":
            if any(not s > 0 for s in self.sigma2):
                raise ValueError("sigma2 must be positive")
            if any(not abs(r) < 1 for r in self.rho):
                raise ValueError("rho must lie in (-1, 1)")
            if len(self.dims) != 4 or self.dims[3] != 2:
                raise ValueError("scenario 2 has exactly two causes")
        elif any(s < 0 for s in self.sigma2):
            raise ValueError("sigma2 must be non-negative")

    @classmethod
    def scenario1(cls, **kw):
        kw.setdefault("exposures", SCENARIO1_EXPOSURES)
        kw.setdefault("sigma2", (0.2,))
        return cls(scenario="extra-poisson", dims=(6, 6, 20, 8), rho=(0.0,), **kw)

    @classmethod
    def scenario2(cls, **kw):
        kw.setdefault("sigma2", SCENARIO2_SIGMA2)
        kw.setdefault("rho", SCENARIO2_RHO)
        return cls(scenario="correlated-2cause", dims=(6, 6, 20, 2), exposures=(SCENARIO2_EXPOSURE,), **kw)

    def conditions(self):
        rhos = self.rho if self.scenario == "correlated-2cause" else (float("nan"),)
        return list(itertools.product(self.exposures, self.sigma2, rhos))

    def generate(self, seed, exposure, sigma2, rho):
        if self.scenario == "correlated-2cause":
            return gen_scenario2(seed, sigma2, rho, exposure, self.alpha, self.beta, self.dims)
        return gen_scenario1(seed, exposure, sigma2, self.alpha, self.beta, self.dims)

    def unified_spec(self) -> ModelSpec:
        if self.scenario == "correlated-2cause":
            return ModelSpec(fixed_terms=("intercept", "region", "age", "cause"), walks=None,
                             overdispersion="bivariate")
        return ModelSpec(fixed_terms=("intercept", "cause"), walks=None, overdispersion="iid")

    def multistage_terms(self):
        if self.scenario == "correlated-2cause":
            return ("intercept", "region", "age")
        return ("intercept",)


_FAILURES = (InferenceError, DataError, gmrf.NotPositiveDefiniteError, np.linalg.LinAlgError, FloatingPointError)


def _summaries(draws):
    q = np.nanquantile(draws, [0.025, 0.5, 0.975], axis=0)
    return q[1], q[0], q[2]


def run_replicate(config: ScenarioConfig, condition: int, replicate: int):
    """Generate one dataset and evaluate every configured estimator on it.

    Returns a list of record dicts (one per estimator); failures are returned
    as records with an ``error`` entry.
    """
    exposure, sigma2, rho = config.conditions()[condition]
    data, truth = config.generate(stream_seed(config.seed, condition, replicate, STREAM_DATA), exposure, sigma2, rho)
    out = []
    base = {"scenario": config.scenario, "exposure": exposure, "sigma2": sigma2, "rho": rho,
            "condition": condition, "replicate": replicate}
    for est in config.estimators:
        rec = dict(base, estimator=est)
        try:
            if est == "unified":
                model = LatentGaussianModel.from_spec(data, config.unified_spec())
                res = fit(model, n_draws=config.n_draws,
                          seed=stream_seed(config.seed, condition, replicate, STREAM_UNIFIED))
                pred = predict_log_rates(res, include_epsilon=True)
                med, lo, hi = pred.median, pred.quantile(0.025), pred.quantile(0.975)
                rec["sigma2_hat"] = res.hyper_mean("log_sd_epsilon", "variance")
                if "atanh_rho" in model.hyper_names:
                    rec["rho_hat"] = res.hyper_mean("atanh_rho", "rho")
                rec["excluded_draws"] = 0
            else:
                ms = fit_multistage(data, config.multistage_terms(), n_draws=config.n_draws,
                                    seed=stream_seed(config.seed, condition, replicate, STREAM_MULTISTAGE))
                med, lo, hi = _summaries(ms.combined.log_csmr.reshape(config.n_draws, -1))
                rec["excluded_draws"] = ms.combined.n_excluded
            m = eval_metrics(med, lo, hi, truth)
            rec.update(m.means())
            rec["undefined_bias_cells"] = int(m.undefined.sum())
        except _FAILURES as exc:
            log.warning("replicate %d, condition %d, %s failed: %s", replicate, condition, est, exc)
            rec["error"] = f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


@dataclass
class SimulationReport:
    config: ScenarioConfig
    records: list
    rows: list
    failures: list
    provenance: dict = field(default_factory=dict)


def aggregate(config: ScenarioConfig, records) -> list:
    """Mean over replicates of per-replicate cell means, with Monte-Carlo standard errors."""
    rows = []
    for ci, (exposure, sigma2, rho) in enumerate(config.conditions()):
        for est in config.estimators:
            recs = [r for r in records if r["condition"] == ci and r["estimator"] == est and "error" not in r]
            metrics = ["bias", "coverage", "width"] + (["sigma2_hat"] if est == "unified" else [])
            if est == "unified" and config.scenario == "correlated-2cause":
                metrics.append("rho_hat")
            for metric in metrics:
                vals = np.array([r[metric] for r in recs if metric in r], dtype=float)
                vals = vals[np.isfinite(vals)]
                value = float(vals.mean()) if vals.size else float("nan")
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
                rows.append({"scenario": config.scenario, "estimator": est, "exposure": exposure,
                             "sigma2": sigma2, "rho": rho, "metric": metric, "value": value, "mc_se": se})
    return rows


def run_experiment(config: ScenarioConfig, threads: int = 1) -> SimulationReport:
    """Every replicate of every condition; deterministic given ``config.seed``.

    Replicates may run concurrently (``threads``); records are merged in
    (condition, replicate) order.
    """
    t0 = time.perf_counter()
    jobs = [(c, r) for c in range(len(config.conditions())) for r in range(config.replicates)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda j: run_replicate(config, *j), jobs))
    else:
        results = [run_replicate(config, *j) for j in jobs]
    records = [r for res in results for r in res]
    failures = [r for r in records if "error" in r]
    rows = aggregate(config, records)
    prov = {
        "config": asdict(config),
        "seed_scheme": "SeedSequence([seed, condition, replicate, stream]); streams data=0, unified=1, multistage=2",
        "n_failures": len(failures),
        "excluded_replicates": [{k: f[k] for k in ("condition", "replicate", "estimator", "error")} for f in failures],
        "numpy": np.__version__,
        "wall_seconds": time.perf_counter() - t0,
    }
    return SimulationReport(config, records, rows, failures, prov)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: SimulationReport, out_dir) -> None:
    """``report.csv`` (aggregates), ``replicates.csv`` and ``provenance.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    cols = ["scenario", "estimator", "exposure", "sigma2", "rho", "condition", "replicate", "bias", "coverage",
            "width", "sigma2_hat", "rho_hat", "excluded_draws", "undefined_bias_cells", "error"]
    with (out / "replicates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.records:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
    with (out / "provenance.json").open("w") as fh:
        json.dump(report.provenance, fh, indent=2, default=str)
