"""Multistage comparator: separate all-cause and per-cause Poisson GLMMs.

Each stage is a Poisson log-linear model with fixed effects and IID
stratum effects, fitted with the Laplace engine. Draws of the stages are
paired by index and combined into cause-specific rates
``lambda_{h+} * lambda_{hc} / sum_c lambda_{hc}``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, TabulatedDataset
from .engine import LatentGaussianModel, PosteriorResult, fit, predict_log_rates
from .modelspec import ModelSpec, VariancePrior

STAGE_EPSILON_PRIOR = VariancePrior("pc", 5.0, 0.01)


def stage_spec(fixed_terms=("intercept",), epsilon_prior: VariancePrior = STAGE_EPSILON_PRIOR) -> ModelSpec:
    """Single-cause model: fixed effects plus IID stratum effects, no walks."""
    return ModelSpec(fixed_terms=tuple(fixed_terms), walks=None, overdispersion="iid",
                     epsilon_prior=epsilon_prior)


def stage_seed(seed: int, stage: int) -> int:
    """Seed of one stage derived from the base seed (stage 0 is all-cause, ``c + 1`` cause ``c``)."""
    return int(np.random.SeedSequence([int(seed), 1, int(stage)]).generate_state(1)[0])


@dataclass(eq=False)
class StageFit:
    """Posterior draws of stratum rates for one stage.

    :ivar log_rate_draws: (n_draws x H) log rates, strata in (region, age, year) order.
    """

    log_rate_draws: np.ndarray
    result: PosteriorResult

    @property
    def rate_draws(self):
        return np.exp(self.log_rate_draws)


def _fit_stage(dataset: TabulatedDataset, fixed_terms, n_draws, seed, epsilon_prior) -> StageFit:
    if dataset.dims[3] != 1:
        raise ValueError("a stage model takes a single-cause dataset")
    if not dataset.observed().any():
        raise DataError("empty dataset: no observed cells with positive exposure")
    model = LatentGaussianModel.from_spec(dataset, stage_spec(fixed_terms, epsilon_prior))
    res = fit(model, n_draws=n_draws, seed=seed)
    # stratum effects are part of each stratum's rate in this comparator
    pred = predict_log_rates(res, include_epsilon=True)
    return StageFit(pred.draws, res)


def fit_allcause(dataset: TabulatedDataset, fixed_terms=("intercept",), n_draws: int = 1000, seed: int = 0,
                 epsilon_prior: VariancePrior = STAGE_EPSILON_PRIOR) -> StageFit:
    """All-cause stage: deaths summed over causes per stratum."""
    return _fit_stage(dataset.collapse_causes(), fixed_terms, n_draws, seed, epsilon_prior)


def fit_percause(dataset: TabulatedDataset, cause: int, fixed_terms=("intercept",), n_draws: int = 1000,
                 seed: int = 0, epsilon_prior: VariancePrior = STAGE_EPSILON_PRIOR) -> StageFit:
    """Cause-specific stage with its own intercept and stratum effects."""
    C = dataset.dims[3]
    if not 0 <= cause < C:
        raise ValueError(f"cause index {cause} out of range 0..{C - 1}")
    return _fit_stage(dataset.select_causes([cause]), fixed_terms, n_draws, seed, epsilon_prior)


@dataclass(eq=False)
class CombinedDraws:
    """Combined log cause-specific rates, (n_draws x H x C).

    Draws with a zero per-cause denominator are NaN for that stratum and
    counted in ``n_excluded``.
    """

    log_csmr: np.ndarray
    fractions: np.ndarray
    n_excluded: int


def combine_multistage(allcause_draws, percause_draws) -> CombinedDraws:
    """Pair draws by index: ``p_hc = l_hc / sum_c l_hc``, ``log l_hc* = log(l_h+ p_hc)``.

    :param allcause_draws: (S x H) all-cause rates.
    :param percause_draws: (S x H x C) cause-specific rates.
    """
    lam_all = np.asarray(allcause_draws, dtype=float)
    lam_c = np.asarray(percause_draws, dtype=float)
    if lam_c.ndim != 3 or lam_all.shape != lam_c.shape[:2]:
        raise ValueError(f"draw shapes {lam_all.shape} and {lam_c.shape} are not paired (S x H) and (S x H x C)")
    denom = lam_c.sum(axis=2, keepdims=True)
    bad = denom[..., 0] <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(denom > 0, lam_c / np.where(denom > 0, denom, 1.0), np.nan)
        out = np.log(lam_all)[..., None] + np.log(p)
    out[bad] = np.nan
    return CombinedDraws(out, p, int(bad.sum()))


@dataclass(eq=False)
class MultistageFit:
    allcause: StageFit
    percause: list = field(default_factory=list)
    combined: CombinedDraws | None = None

    @property
    def allcause_draws(self):
        return self.allcause.rate_draws

    @property
    def percause_draws(self):
        return np.stack([s.rate_draws for s in self.percause], axis=2)

    @property
    def combined_log_csmr_draws(self):
        return self.combined.log_csmr


def fit_multistage(dataset: TabulatedDataset, fixed_terms=("intercept",), n_draws: int = 1000, seed: int = 0,
                   threads: int = 1, epsilon_prior: VariancePrior = STAGE_EPSILON_PRIOR) -> MultistageFit:
    """All-cause fit, one fit per cause, and their combination.

    Stage ``s`` uses :func:`stage_seed`\\ ``(seed, s)`` so results do not depend on
    ``threads``.
    """
    C = dataset.dims[3]

    def run(stage):
        if stage == 0:
            return fit_allcause(dataset, fixed_terms, n_draws, stage_seed(seed, 0), epsilon_prior)
        return fit_percause(dataset, stage - 1, fixed_terms, n_draws, stage_seed(seed, stage), epsilon_prior)

    stages = list(range(C + 1))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            fits = list(ex.map(run, stages))
    else:
        fits = [run(s) for s in stages]
    out = MultistageFit(fits[0], fits[1:])
    out.combined = combine_multistage(out.allcause_draws, out.percause_draws)
    return out
