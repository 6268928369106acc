"""Model checking: residuals, information criteria, hold-out prediction, CSMFs."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.stats as st
from scipy.special import logsumexp

from .data import DIMENSIONS, TabulatedDataset, holdout_split
from .engine import QUANTILES, LatentGaussianModel, PosteriorResult, fit, predict_log_rates, summarize_draws
from .modelspec import ModelSpec

CPO_REL_ERROR_LIMIT = 0.1


# ------------------------------------------------------------- residuals

def standardized_residuals(deaths, expected):
    """``(y - N lambda) / sqrt(N lambda)`` elementwise.

    :param expected: fitted means ``N * lambda``.
    :raises ValueError: a zero fitted mean with a nonzero count.
    """
    y = np.asarray(deaths, dtype=float)
    mu = np.asarray(expected, dtype=float)
    if np.any((mu <= 0) & (y > 0)):
        raise ValueError("zero fitted mean for a cell with deaths")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mu > 0, (y - mu) / np.sqrt(np.where(mu > 0, mu, 1.0)), 0.0)


@dataclass(eq=False)
class ResidualTable:
    """Residuals of observed cells.

    :ivar cells: flat grid indices of the observed cells.
    :ivar keys: (n x 4) region/age/year/cause indices.
    :ivar expected: fitted means ``N * median rate``.
    """

    cells: np.ndarray
    keys: np.ndarray
    deaths: np.ndarray
    expected: np.ndarray
    residuals: np.ndarray


def fit_residuals(result: PosteriorResult, dataset: TabulatedDataset | None = None) -> ResidualTable:
    """Residuals at the posterior median rate, overdispersion excluded."""
    ds = dataset if dataset is not None else result.model.dataset
    cells = np.flatnonzero(ds.observed().ravel())
    pred = predict_log_rates(result, include_epsilon=False, cells=cells, probs=(0.5,))
    mu = ds.cell_exposure().ravel()[cells] * np.exp(pred.quantiles[0])
    y = ds.deaths.ravel()[cells].astype(float)
    keys = np.stack(np.unravel_index(cells, ds.dims), axis=1)
    return ResidualTable(cells, keys, y, mu, standardized_residuals(y, mu))


GROUPINGS = tuple(g for k in (2, 3) for g in itertools.combinations(DIMENSIONS, k))


def grouped_residuals(table: ResidualTable, groupings=GROUPINGS):
    """Summary rows per level combination for every grouping.

    Each grouping partitions the observed cells, so every cell contributes to
    exactly one row per grouping. Rows are dicts with ``grouping``, ``level``
    (tuple of indices), ``n``, ``mean`` and ``var``.
    """
    rows = []
    col = {d: i for i, d in enumerate(DIMENSIONS)}
    for g in groupings:
        idx = [col[d] for d in g]
        levels, inv = np.unique(table.keys[:, idx], axis=0, return_inverse=True)
        inv = inv.ravel()
        n = np.bincount(inv, minlength=len(levels))
        s1 = np.bincount(inv, table.residuals, minlength=len(levels))
        s2 = np.bincount(inv, table.residuals ** 2, minlength=len(levels))
        mean = s1 / n
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(n > 1, (s2 - n * mean ** 2) / np.maximum(n - 1, 1), np.nan)
        for j, lv in enumerate(levels):
            rows.append({"grouping": ":".join(g), "level": tuple(int(v) for v in lv), "n": int(n[j]),
                         "mean": float(mean[j]), "var": float(var[j])})
    return rows


# ------------------------------------------------------------- information criteria

@dataclass
class InformationCriteria:
    dic: float
    p_dic: float
    waic: float
    p_waic: float
    lppd: float
    neg_sum_log_cpo: float
    cpo: np.ndarray
    cpo_unstable: np.ndarray

    @property
    def n_unstable(self) -> int:
        return int(self.cpo_unstable.sum())


def ic_from_loglik(loglik, loglik_at_mean) -> InformationCriteria:
    """Criteria from pointwise log-likelihoods.

    :param loglik: (S x n) log-likelihood of each cell under each draw.
    :param loglik_at_mean: (n,) log-likelihood at the posterior mean of the linear predictor.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("information criteria need at least 2 draws")
    S = ll.shape[0]
    d_bar = -2.0 * float(ll.sum(axis=1).mean())
    d_hat = -2.0 * float(np.sum(loglik_at_mean))
    p_dic = d_bar - d_hat
    lppd_i = logsumexp(ll, axis=0) - math.log(S)
    p_waic_i = ll.var(axis=0, ddof=1)
    lppd = float(lppd_i.sum())
    p_waic = float(p_waic_i.sum())
    # harmonic-mean CPO: 1 / mean_s(1 / p_is), computed on the log scale
    log_inv_mean = logsumexp(-ll, axis=0) - math.log(S)
    log_cpo = -log_inv_mean
    inv = np.exp(-ll - log_inv_mean)  # 1/p_is scaled by the mean, so mean over s is 1
    rel_err = inv.std(axis=0, ddof=1) / math.sqrt(S)
    return InformationCriteria(
        dic=d_bar + p_dic,
        p_dic=p_dic,
        waic=-2.0 * (lppd - p_waic),
        p_waic=p_waic,
        lppd=lppd,
        neg_sum_log_cpo=float(-log_cpo.sum()),
        cpo=np.exp(log_cpo),
        cpo_unstable=rel_err > CPO_REL_ERROR_LIMIT,
    )


def pointwise_loglik(model: LatentGaussianModel, eta):
    """Poisson log-likelihood of each observed cell at linear predictors ``eta`` (... x n_obs)."""
    eta = np.asarray(eta, dtype=float)
    return st.poisson.logpmf(model.y, model.exposure * np.exp(eta))


def information_criteria(result: PosteriorResult) -> InformationCriteria:
    """DIC, WAIC and ``-sum log CPO`` over the observed cells of a fit."""
    model = result.model
    if result.draws.shape[0] < 2:
        raise ValueError("information criteria need at least 2 draws")
    eta = np.asarray(model.X @ result.draws.T).T
    return ic_from_loglik(pointwise_loglik(model, eta), pointwise_loglik(model, eta.mean(axis=0)))


# ------------------------------------------------------------- hold-out

@dataclass(eq=False)
class HoldoutResult:
    """Predictions for the held-out year.

    :ivar cells: flat indices (in the full grid) of held cells.
    :ivar quantiles: (len(probs) x n) log-rate quantiles, overdispersion excluded.
    :ivar draws: (S x n) predictive log-rate draws.
    :ivar observed: log empirical rates, NaN where undefined (zero deaths).
    :ivar count_interval: (2 x n) 95% Poisson predictive interval of counts.
    """

    year: int
    cells: np.ndarray
    keys: np.ndarray
    probs: tuple
    quantiles: np.ndarray
    draws: np.ndarray
    deaths: np.ndarray
    exposure: np.ndarray
    observed: np.ndarray
    defined: np.ndarray
    count_interval: np.ndarray
    result: PosteriorResult

    def quantile(self, p):
        return self.quantiles[self.probs.index(p)]

    def coverage(self, truth=None, lo: float = 0.025, hi: float = 0.975) -> float:
        """Share of cells whose truth (default: defined observed log rates) lies in the interval."""
        if truth is None:
            t, keep = self.observed, self.defined
        else:
            t, keep = np.asarray(truth, dtype=float), np.ones(len(self.cells), bool)
        inside = (self.quantile(lo) <= t) & (t <= self.quantile(hi))
        return float(inside[keep].mean()) if keep.any() else float("nan")

    def mean_abs_error(self) -> float:
        d = self.defined
        return float(np.mean(np.abs(self.quantile(0.5)[d] - self.observed[d]))) if d.any() else float("nan")

    def count_coverage(self) -> float:
        lo, hi = self.count_interval
        return float(np.mean((lo <= self.deaths) & (self.deaths <= hi)))


def _extrapolate_last_year(result: PosteriorResult, train: TabulatedDataset, seed):
    """Log-rate draws for one year past the training grid.

    Each walk moves one step by its second-order form,
    ``g_{T+1} = 2 g_T - g_{T-1} + sigma * z``, with ``sigma`` the draw's walk
    standard deviation; fixed effects carry over unchanged.
    """
    model = result.model
    real = model.realization
    R, A, T, C = train.dims
    last = np.ravel_multi_index(np.meshgrid(np.arange(R), np.arange(A), [T - 1], np.arange(C), indexing="ij"),
                                train.dims).ravel()
    base = predict_log_rates(result, include_epsilon=False, cells=last, probs=(0.5,)).draws
    if not real.n_walks:
        return base
    rng = np.random.default_rng(seed)
    start = real.latent_index["walks"].start
    W = real.walk_length
    walk_of = real.cell_walk[last]
    g_last = result.draws[:, start + walk_of * W + W - 1]
    g_prev = result.draws[:, start + walk_of * W + W - 2]
    th = result.draw_thetas()
    groups = real.walk_variance_group
    n_groups = int(groups.max()) + 1
    names = ["log_sd_walk"] if n_groups == 1 else [f"log_sd_walk[{g}]" for g in range(n_groups)]
    sd_walk = np.exp(th[:, [model.hyper_names.index(n) for n in names]])[:, groups]  # (S x n_walks)
    z = rng.standard_normal((result.draws.shape[0], real.n_walks))
    step = sd_walk * z
    # increment of the walk between the last training year and the new year
    incr = (g_last - g_prev) + step[:, walk_of]
    return base + incr


def holdout_evaluate(dataset: TabulatedDataset, spec: ModelSpec, year: int, n_draws: int = 1000, seed: int = 0,
                     probs=QUANTILES, threads: int = 1) -> HoldoutResult:
    """Fit without ``year`` and predict its log rates.

    The final year is predicted by one-step walk extrapolation from a fit on
    the earlier years; an interior year is masked and predicted by the
    constrained walks that span it.
    """
    R, A, T, C = dataset.dims
    train_masked, held = holdout_split(dataset, year)
    if year == T - 1:
        train = train_masked.select_years(range(T - 1))
        model = LatentGaussianModel.from_spec(train, spec)
        res = fit(model, n_draws=n_draws, seed=seed, threads=threads)
        all_draws = _extrapolate_last_year(res, train, np.random.SeedSequence([int(seed), 11]))
        grid_last = np.ravel_multi_index(
            np.meshgrid(np.arange(R), np.arange(A), [T - 1], np.arange(C), indexing="ij"), dataset.dims).ravel()
        pos = {c: i for i, c in enumerate(grid_last)}
        draws = all_draws[:, [pos[c] for c in held.flat_index]]
    else:
        model = LatentGaussianModel.from_spec(train_masked, spec)
        res = fit(model, n_draws=n_draws, seed=seed, threads=threads)
        draws = predict_log_rates(res, include_epsilon=False, cells=held.flat_index, probs=(0.5,)).draws
    q = summarize_draws(draws, probs)
    y = held.deaths.astype(float)
    N = held.exposure
    defined = y > 0
    with np.errstate(divide="ignore"):
        obs = np.where(defined, np.log(np.where(defined, y, 1.0) / N), np.nan)
    # count-scale check: Poisson predictive draws
    rng = np.random.default_rng([int(seed), 13])
    counts = rng.poisson(N[None, :] * np.exp(np.minimum(draws, 30.0)))
    cint = np.quantile(counts, [0.025, 0.975], axis=0)
    keys = np.stack(np.unravel_index(held.flat_index, dataset.dims), axis=1)
    return HoldoutResult(year, held.flat_index, keys, tuple(probs), q, draws, y, N, obs, defined, cint, res)


# ------------------------------------------------------------- CSMFs

@dataclass(eq=False)
class CSMFDraws:
    """Cause fractions per draw, (S x R x A x T x C), with quantile summaries."""

    draws: np.ndarray
    probs: tuple
    quantiles: np.ndarray


def csmf_from_draws(log_rate_draws, probs=QUANTILES) -> CSMFDraws:
    """``p_c = lambda_c / sum_c lambda_c`` per draw; causes on the last axis."""
    lr = np.asarray(log_rate_draws, dtype=float)
    # softmax on the log scale avoids overflow
    p = np.exp(lr - logsumexp(lr, axis=-1, keepdims=True))
    return CSMFDraws(p, tuple(probs), np.quantile(p, probs, axis=0))
