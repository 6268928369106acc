"""Laplace-approximation inference for the Poisson latent Gaussian model.

The latent vector ``x`` (fixed effects, walk coefficients, overdispersion
effects) has a Gaussian prior with precision ``Q(theta)`` and linear
constraints ``A x = 0``. Cells contribute Poisson terms with mean
``N * exp(eta)``, ``eta = X x``. Hyperparameters ``theta`` are log standard
deviations (and ``atanh(rho)`` for a correlated pair).

Inference follows the usual nested scheme: a constrained Newton solve gives
the conditional mode of ``x`` for each ``theta``, the Laplace approximation
gives the marginal posterior of ``theta`` up to a constant, a small grid
around its mode is weighted by that marginal, and latent draws are mixed over
the grid.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as opt
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln

from . import gmrf
from .data import TabulatedDataset
from .modelspec import DesignRealization, ModelSpec, VariancePrior, build_design, pc_prior_rate

log = logging.getLogger(__name__)

ETA_CLAMP = 30.0
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
QUANTILES = (0.025, 0.1, 0.5, 0.9, 0.975)
THETA_BOUNDS = {"log_sd": (-12.0, 4.0), "atanh": (-4.0, 4.0)}


class InferenceError(RuntimeError):
    """Numerical failure during model fitting."""


class InnerNewtonError(InferenceError):
    pass


class HyperOptimizationError(InferenceError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class ClampWarning(RuntimeWarning):
    pass


# ------------------------------------------------------------- hyperpriors

@dataclass(frozen=True)
class PCSdPrior:
    """Exponential prior on ``sigma = exp(theta)``, written on the theta scale."""

    rate: float

    @classmethod
    def from_tail(cls, u, alpha):
        return cls(pc_prior_rate(u, alpha))

    def logpdf(self, th):
        return math.log(self.rate) - self.rate * math.exp(th) + th

    def grad(self, th):
        return 1.0 - self.rate * math.exp(th)


@dataclass(frozen=True)
class GammaPrecisionPrior:
    """Gamma(shape, rate) prior on the precision ``exp(-2 theta)``."""

    shape: float
    rate: float

    def logpdf(self, th):
        tau = math.exp(-2.0 * th)
        a, b = self.shape, self.rate
        return a * math.log(b) - gammaln(a) + a * math.log(tau) - b * tau + math.log(2.0)

    def grad(self, th):
        return -2.0 * self.shape + 2.0 * self.rate * math.exp(-2.0 * th)


@dataclass(frozen=True)
class UniformCorrelationPrior:
    """Uniform prior on ``rho = tanh(theta)`` over (-1, 1)."""

    def logpdf(self, th):
        # log(1 - tanh^2) computed stably
        return math.log(0.5) + math.log(4.0) - 2.0 * abs(th) - 2.0 * math.log1p(math.exp(-2.0 * abs(th)))

    def grad(self, th):
        return -2.0 * math.tanh(th)


def variance_prior(p: VariancePrior):
    if p.kind == "pc":
        return PCSdPrior.from_tail(p.u, p.alpha)
    return GammaPrecisionPrior(p.shape, p.rate)


# ------------------------------------------------------------- latent blocks

@dataclass(eq=False)
class LatentBlock:
    """One prior block of the latent vector.

    ``kind`` is ``"fixed"`` (precision ``fixed_precision * K``), ``"scaled"``
    (precision ``exp(-2 theta[hyper]) * K``) or ``"bivariate"`` (pairs with
    standard deviation ``exp(theta[hyper])`` and correlation
    ``tanh(theta[rho_hyper])``).
    """

    name: str
    index: np.ndarray
    kind: str
    structure: sp.csr_matrix
    eff_rank: int
    logdet_structure: float = 0.0
    hyper: int | None = None
    rho_hyper: int | None = None
    fixed_precision: float = 1.0

    def __post_init__(self):
        n = len(self.index)
        S = sp.csr_matrix(self.structure)
        P = sp.csr_matrix((np.ones(n), (self.index, np.arange(n))), shape=(int(self.n_total), n))
        self._embed = (P @ S @ P.T).tocsr()
        if self.kind == "bivariate":
            pairs = n // 2
            off = sp.kron(sp.eye(pairs), sp.csr_matrix([[0.0, 1.0], [1.0, 0.0]]), format="csr")
            self._embed_off = (P @ off @ P.T).tocsr()

    n_total: int = 0

    def coefficients(self, theta):
        """Scale(s) multiplying the embedded structure matrices."""
        if self.kind == "fixed":
            return (self.fixed_precision,)
        if self.kind == "scaled":
            return (math.exp(-2.0 * theta[self.hyper]),)
        s2 = math.exp(2.0 * theta[self.hyper])
        rho = math.tanh(theta[self.rho_hyper])
        f = 1.0 / (s2 * (1.0 - rho * rho))
        return (f, -rho * f)

    def precision(self, theta):
        c = self.coefficients(theta)
        if self.kind == "bivariate":
            return c[0] * self._embed + c[1] * self._embed_off
        return c[0] * self._embed

    def log_density(self, x, theta):
        xb = x[self.index]
        if self.kind == "fixed":
            if self.fixed_precision == 0.0:
                return 0.0
            c = self.fixed_precision
            r = self.eff_rank
            return 0.5 * r * (math.log(c) - gmrf.LOG_2PI) + 0.5 * self.logdet_structure \
                - 0.5 * c * float(xb @ (self.structure @ xb))
        if self.kind == "scaled":
            lt = -2.0 * theta[self.hyper]
            r = self.eff_rank
            q = float(xb @ (self.structure @ xb))
            return 0.5 * r * (lt - gmrf.LOG_2PI) + 0.5 * self.logdet_structure - 0.5 * math.exp(lt) * q
        pairs = len(xb) // 2
        s, z = theta[self.hyper], theta[self.rho_hyper]
        rho = math.tanh(z)
        x1, x2 = xb[0::2], xb[1::2]
        a = float(x1 @ x1 + x2 @ x2)
        b = float(x1 @ x2)
        one_m = 1.0 - rho * rho
        quad = (a - 2.0 * rho * b) / (math.exp(2.0 * s) * one_m)
        return -pairs * gmrf.LOG_2PI - 0.5 * pairs * (4.0 * s + math.log(one_m)) - 0.5 * quad

    def grad_theta(self, x, theta, out):
        """Add d(log density)/d(theta) into ``out``."""
        xb = x[self.index]
        if self.kind == "scaled":
            tau = math.exp(-2.0 * theta[self.hyper])
            q = float(xb @ (self.structure @ xb))
            out[self.hyper] += -self.eff_rank + tau * q
        elif self.kind == "bivariate":
            pairs = len(xb) // 2
            s, z = theta[self.hyper], theta[self.rho_hyper]
            rho = math.tanh(z)
            x1, x2 = xb[0::2], xb[1::2]
            a = float(x1 @ x1 + x2 @ x2)
            b = float(x1 @ x2)
            denom = math.exp(2.0 * s) * (1.0 - rho * rho)
            out[self.hyper] += -2.0 * pairs + (a - 2.0 * rho * b) / denom
            out[self.rho_hyper] += pairs * rho + (b * (1.0 + rho * rho) - rho * a) / denom


# ------------------------------------------------------------- the model

class LatentGaussianModel:
    """Latent Gaussian model with Poisson (or Gaussian, for testing) observations.

    Immutable after construction; instances may be shared between threads.

    :param design: (n_obs x n_latent) sparse design.
    :param y: observed counts (or responses for ``family="gaussian"``).
    :param exposure: person-years per observation (ignored for Gaussian).
    :param blocks: prior blocks covering every latent coordinate once.
    :param constraints: (k x n_latent) constraint matrix, ``A x = 0``.
    :param hyper_priors: one prior object (``logpdf``/``grad``) per theta entry.
    """

    def __init__(self, design, y, exposure, blocks, constraints=None, hyper_priors=(),
                 hyper_names=None, theta0=None, family="poisson", obs_precision=None,
                 realization: DesignRealization | None = None, spec: ModelSpec | None = None,
                 dataset: TabulatedDataset | None = None):
        self.X = sp.csr_matrix(design, dtype=float)
        self.Xt = self.X.T.tocsr()
        self.n_obs, self.n_latent = self.X.shape
        self.y = np.asarray(y, dtype=float)
        self.exposure = np.ones(self.n_obs) if exposure is None else np.asarray(exposure, dtype=float)
        if self.y.shape != (self.n_obs,) or self.exposure.shape != (self.n_obs,):
            raise ValueError("y and exposure must have one entry per design row")
        if family not in ("poisson", "gaussian"):
            raise ValueError(f"unknown family {family!r}")
        self.family = family
        self.obs_precision = None if obs_precision is None else np.broadcast_to(
            np.asarray(obs_precision, dtype=float), (self.n_obs,)).copy()
        if family == "gaussian" and self.obs_precision is None:
            raise ValueError("gaussian family needs obs_precision")
        if family == "poisson":
            with np.errstate(divide="ignore"):
                self._log_expo = np.where(self.exposure > 0, np.log(self.exposure), 0.0)
            self._ll_const = float(np.sum(self.y * self._log_expo - gammaln(self.y + 1.0)))
        self.blocks = list(blocks)
        for b in self.blocks:
            if b.n_total != self.n_latent:
                raise ValueError(f"block {b.name} embedded in {b.n_total} coordinates, expected {self.n_latent}")
        cover = np.zeros(self.n_latent, int)
        for b in self.blocks:
            cover[b.index] += 1
        if np.any(cover != 1):
            raise ValueError("prior blocks must cover every latent coordinate exactly once")
        self.A = sp.csr_matrix((0, self.n_latent)) if constraints is None else sp.csr_matrix(constraints, dtype=float)
        self.k = self.A.shape[0]
        if self.k:
            AAt = (self.A @ self.A.T).toarray()
            self._AAt_cho = np.linalg.cholesky(AAt)
            self.logdet_AAt = float(2.0 * np.sum(np.log(np.diag(self._AAt_cho))))
            self._AtA = (self.A.T @ self.A).tocsr()
        else:
            self.logdet_AAt = 0.0
        self._constraint_mass = self._proper_constraint_terms()
        self.hyper_priors = list(hyper_priors)
        self.hyper_names = list(hyper_names) if hyper_names is not None else [f"theta{i}" for i in range(len(self.hyper_priors))]
        self.n_hyper = len(self.hyper_priors)
        self.theta0 = np.zeros(self.n_hyper) if theta0 is None else np.asarray(theta0, dtype=float)
        self.realization = realization
        self.spec = spec
        self.dataset = dataset

    def _proper_constraint_terms(self):
        """``(hyper, k_b, constant)`` for constraints that bind proper scaled blocks.

        Under a proper block prior, conditioning on ``A_b x_b = 0`` divides the
        prior by ``p(A_b x_b = 0 | theta)``, which depends on theta. Constraints
        on the null space of an intrinsic block carry no such term.
        """
        out = []
        if not self.k:
            return out
        A = self.A.tocsc()
        for b in self.blocks:
            if b.kind != "scaled" or b.eff_rank < len(b.index):
                continue
            Ab = A[:, b.index]
            rows = np.flatnonzero(np.asarray(abs(Ab).sum(axis=1)).ravel() > 0)
            if not rows.size:
                continue
            outside = np.setdiff1d(np.arange(self.n_latent), b.index)
            if A[rows][:, outside].nnz:
                raise ValueError(f"constraints on block {b.name} also involve other blocks")
            Ab = Ab[rows].toarray()
            M = Ab @ spla.splu(sp.csc_matrix(b.structure)).solve(Ab.T)
            kb = len(rows)
            const = (-0.5 * kb * gmrf.LOG_2PI - 0.5 * np.linalg.slogdet(M)[1]
                     + 0.5 * np.linalg.slogdet(Ab @ Ab.T)[1])
            out.append((b.hyper, kb, float(const)))
        return out

    def log_constraint_mass(self, theta) -> float:
        """``sum_b log p(A_b x_b = 0 | theta) + log|A_b A_b'| / 2`` over proper constrained blocks."""
        return float(sum(c - kb * theta[j] for j, kb, c in self._constraint_mass))

    # -- construction from a data grid and spec

    @classmethod
    def from_spec(cls, dataset: TabulatedDataset, spec: ModelSpec) -> "LatentGaussianModel":
        """Model for ``dataset`` under ``spec`` (observed, positive-exposure cells only)."""
        observed = dataset.observed()
        real = build_design(spec, dataset.dims, observed)
        y = dataset.deaths.ravel()[real.observed_cells]
        N = dataset.cell_exposure().ravel()[real.observed_cells]
        n = real.n_latent
        blocks, priors, names, theta0 = [], [], [], []

        for term, sl in real.latent_index.items():
            if term in ("walks", "epsilon"):
                continue
            idx = np.arange(sl.start, sl.stop)
            if term == "intercept":
                prec = 0.0 if spec.intercept_prior == "flat" else 1.0 / spec.intercept_variance
            else:
                prec = 1.0 / spec.fixed_variance
            blocks.append(LatentBlock(term, idx, "fixed", sp.eye(len(idx), format="csr"),
                                      eff_rank=len(idx), fixed_precision=prec, n_total=n))

        if real.n_walks:
            w = spec.walks
            T = real.walk_length
            if w.structure == "rw2":
                K1 = gmrf.rw2_structure(T)
            elif w.structure == "rw1":
                K1 = gmrf.rw1_structure(T)
            else:
                K1 = gmrf.ar1_structure(T, w.ar1_phi)
            # one sum-to-zero constraint per walk; constants lie in the null space of rw1/rw2
            eff_rank_1 = min(K1.rank, T - 1)
            ld1 = K1.logdet_plus()
            start = real.latent_index["walks"].start
            groups = real.walk_variance_group
            n_groups = int(groups.max()) + 1
            prior = variance_prior(spec.walk_prior)
            for g in range(n_groups):
                walks = np.flatnonzero(groups == g)
                idx = (start + walks[:, None] * T + np.arange(T)[None, :]).ravel()
                K = sp.kron(sp.eye(len(walks)), K1.structure, format="csr")
                name = "log_sd_walk" if n_groups == 1 else f"log_sd_walk[{g}]"
                blocks.append(LatentBlock(name, idx, "scaled", K, eff_rank=eff_rank_1 * len(walks),
                                          logdet_structure=ld1 * len(walks), hyper=len(names), n_total=n))
                priors.append(prior)
                names.append(name)
                theta0.append(math.log(0.1))

        if spec.overdispersion != "none":
            sl = real.latent_index["epsilon"]
            idx = np.arange(sl.start, sl.stop)
            prior = variance_prior(spec.epsilon_prior)
            if spec.overdispersion == "iid":
                blocks.append(LatentBlock("epsilon", idx, "scaled", sp.eye(len(idx), format="csr"),
                                          eff_rank=len(idx), hyper=len(names), n_total=n))
                priors.append(prior)
                names.append("log_sd_epsilon")
                theta0.append(math.log(0.3))
            else:
                blocks.append(LatentBlock("epsilon", idx, "bivariate", sp.eye(len(idx), format="csr"),
                                          eff_rank=len(idx), hyper=len(names), rho_hyper=len(names) + 1,
                                          n_total=n))
                priors += [prior, UniformCorrelationPrior()]
                names += ["log_sd_epsilon", "atanh_rho"]
                theta0 += [math.log(0.3), 0.0]

        return cls(real.design, y, N, blocks, constraints=real.constraints, hyper_priors=priors,
                   hyper_names=names, theta0=np.array(theta0), realization=real, spec=spec, dataset=dataset)

    # -- pieces of the posterior

    def prior_precision(self, theta) -> sp.csr_matrix:
        Q = sp.csr_matrix((self.n_latent, self.n_latent))
        for b in self.blocks:
            Q = Q + b.precision(theta)
        return Q.tocsr()

    def initial_latent(self):
        """Starting point for Newton: intercept at the crude overall log rate."""
        x = np.zeros(self.n_latent)
        if self.family == "poisson":
            for b in self.blocks:
                if b.name == "intercept" and len(b.index) == 1:
                    tot_n = float(self.exposure.sum())
                    if tot_n > 0:
                        x[b.index[0]] = math.log((float(self.y.sum()) + 0.5) / tot_n)
        return x

    def constrained_hessian(self, w, Q):
        """``X' diag(w) X + Q + kappa A'A`` as CSC.

        The ``A'A`` term vanishes on the constraint subspace, so constrained
        Newton steps, the subspace determinant and constrained draws are
        unchanged; it removes the near-singular directions that constrained
        walk levels share with weakly identified fixed effects.
        """
        H = self.Xt @ sp.diags(w) @ self.X + Q
        if self.k:
            kappa = max(1.0, float(H.diagonal().mean()))
            H = H + kappa * self._AtA
        return H.tocsc()

    def linear_predictor(self, x):
        return self.X @ x

    def _lik_terms(self, eta):
        """Negative log-likelihood (kernel), its eta-gradient and curvature; flags clamping."""
        if self.family == "gaussian":
            r = self.y - eta
            p = self.obs_precision
            return 0.5 * float(np.sum(p * r * r)), -p * r, p, False
        clamped = bool(np.any(eta > ETA_CLAMP))
        mu = self.exposure * np.exp(np.minimum(eta, ETA_CLAMP))
        value = float(np.sum(mu - self.y * eta))
        return value, mu - self.y, mu, clamped

    def log_likelihood(self, x) -> float:
        """Full log-likelihood including normalizing constants."""
        eta = self.linear_predictor(x)
        if self.family == "gaussian":
            p = self.obs_precision
            return float(0.5 * np.sum(np.log(p) - gmrf.LOG_2PI) - 0.5 * np.sum(p * (self.y - eta) ** 2))
        v, _, _, _ = self._lik_terms(eta)
        return -v + self._ll_const

    def log_prior_latent(self, x, theta) -> float:
        return float(sum(b.log_density(x, theta) for b in self.blocks))

    def log_prior_hyper(self, theta) -> float:
        return float(sum(p.logpdf(t) for p, t in zip(self.hyper_priors, theta)))

    def project(self, v):
        """Orthogonal projection of ``v`` onto the null space of the constraints."""
        if not self.k:
            return v
        Av = self.A @ v
        lam = np.linalg.solve(self._AAt_cho.T, np.linalg.solve(self._AAt_cho, Av))
        return v - self.A.T @ lam


def neg_log_posterior_latent(x, theta, model: LatentGaussianModel, hessian: bool = True):
    """Negative log conditional posterior of ``x`` given ``theta``, up to a constant.

    Returns ``(value, gradient, hessian)`` with value
    ``sum(N exp(eta) - y eta) + x' Q(theta) x / 2`` and a sparse Hessian
    ``X' diag(N exp(eta)) X + Q(theta)``. Linear predictors above the clamp
    emit a :class:`ClampWarning`.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_latent,):
        raise ValueError(f"latent vector has length {x.shape}, model expects {model.n_latent}")
    eta = model.linear_predictor(x)
    if not np.all(np.isfinite(eta)):
        raise InferenceError("non-finite linear predictor")
    v, g_eta, w, clamped = model._lik_terms(eta)
    if clamped:
        warnings.warn(f"linear predictor clamped at {ETA_CLAMP}", ClampWarning, stacklevel=2)
    Q = model.prior_precision(theta)
    Qx = Q @ x
    value = v + 0.5 * float(x @ Qx)
    grad = model.Xt @ g_eta + Qx
    if not hessian:
        return value, grad, None
    H = (model.Xt @ sp.diags(w) @ model.X + Q).tocsc()
    return value, grad, H


@dataclass(eq=False)
class NewtonResult:
    mode: np.ndarray
    factor: gmrf.CholFactor
    correction: gmrf.ConstraintCorrection
    value: float
    grad_norm: float
    iterations: int
    clamped: bool = False
    stalled: bool = False
    trace: list = field(default_factory=list)


def _objective(x, theta, model, Q):
    eta = model.linear_predictor(x)
    v, _, _, _ = model._lik_terms(eta)
    return v + 0.5 * float(x @ (Q @ x))


def inner_newton(theta, model: LatentGaussianModel, x0=None, tol: float = NEWTON_TOL,
                 max_iter: int = NEWTON_MAX_ITER) -> NewtonResult:
    """Constrained Newton iteration for the conditional mode of ``x`` given ``theta``.

    Converges when the projected gradient satisfies ``||P g||_inf <= tol``.
    Steps are halved until the objective decreases sufficiently, except in the
    quadratic region (Newton decrement below 1e-8) where full steps are taken.
    A round-off-limited stop within ``1e3 * tol`` is accepted and flagged
    ``stalled``.
    """
    theta = np.asarray(theta, dtype=float)
    x = model.initial_latent() if x0 is None else model.project(np.array(x0, dtype=float))
    Q = model.prior_precision(theta)
    trace = []
    clamped_any = False
    for it in range(max_iter + 1):
        eta = model.linear_predictor(x)
        v, g_eta, w, clamped = model._lik_terms(eta)
        clamped_any |= clamped
        Qx = Q @ x
        f = v + 0.5 * float(x @ Qx)
        g = model.Xt @ g_eta + Qx
        H = model.constrained_hessian(w, Q)
        try:
            factor = gmrf.chol_factor(H)
        except gmrf.NotPositiveDefiniteError as exc:
            raise InnerNewtonError(f"Hessian not positive definite at iteration {it}: {exc}") from exc
        corr = gmrf.ConstraintCorrection(factor, model.A)
        pg = model.project(g)
        gnorm = float(np.max(np.abs(pg))) if g.size else 0.0
        trace.append((f, gnorm))
        if gnorm <= tol:
            return NewtonResult(x, factor, corr, f, gnorm, it, clamped_any, False, trace)
        if it == max_iter:
            break
        d = -factor.solve(g)
        d = corr.apply(x + d, target=np.zeros(model.k) if model.k else None) - x
        # d lies in the constraint null space; the projected gradient keeps
        # large constraint-normal components of g out of the slope
        slope = float(pg @ d)
        if slope >= 0:
            if gnorm <= 1e3 * tol:
                # Newton direction lost to round-off just above the tolerance
                return NewtonResult(x, factor, corr, f, gnorm, it, clamped_any, True, trace)
            raise InnerNewtonError(f"non-descent Newton direction at iteration {it} (gradient norm {gnorm:.3g})")
        step = 1.0
        x_new = x + d
        if -slope > 1e-8:
            # outside the quadratic region: halve until sufficient decrease
            while True:
                f_new = _objective(x_new, theta, model, Q)
                if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                    break
                step *= 0.5
                if step < 1e-12:
                    raise InnerNewtonError(f"line search failed at iteration {it} (gradient norm {gnorm:.3g})")
                x_new = x + step * d
        x = x_new
    raise InnerNewtonError(f"inner Newton did not converge in {max_iter} iterations (gradient norm {gnorm:.3g})")


@dataclass(eq=False)
class LaplacePoint:
    """Gaussian approximation of ``x | theta, y`` at one hyperparameter value."""

    theta: np.ndarray
    log_marginal: float
    newton: NewtonResult

    @property
    def mode(self):
        return self.newton.mode


def laplace_point(theta, model: LatentGaussianModel, x0=None) -> LaplacePoint:
    theta = np.asarray(theta, dtype=float)
    nr = inner_newton(theta, model, x0=x0)
    x = nr.mode
    n, k = model.n_latent, model.k
    value = (
        model.log_prior_hyper(theta)
        + model.log_likelihood(x)
        + model.log_prior_latent(x, theta)
        - 0.5 * nr.factor.logdet
        + 0.5 * (n - k) * gmrf.LOG_2PI
    )
    if k:
        value += -0.5 * nr.correction.logdet_S + 0.5 * model.logdet_AAt - model.log_constraint_mass(theta)
    return LaplacePoint(theta, float(value), nr)


def log_marginal_hyper(theta, model: LatentGaussianModel, x0=None) -> float:
    """Laplace approximation of ``log p(theta | y)`` up to an additive constant.

    For Gaussian observations and proper priors this equals
    ``log p(theta) + log p(y | theta)`` exactly.
    """
    return laplace_point(theta, model, x0).log_marginal


# ------------------------------------------------------------- hyperparameters

@dataclass(eq=False)
class HyperResult:
    """Explored hyperparameter points with normalized weights."""

    points: list
    weights: np.ndarray
    theta_mode: np.ndarray
    curvature: np.ndarray
    n_evaluations: int
    trace: list

    @property
    def thetas(self):
        return np.array([p.theta for p in self.points])

    @property
    def log_marginals(self):
        return np.array([p.log_marginal for p in self.points])


def _theta_bounds(model):
    return [THETA_BOUNDS["atanh"] if name.startswith("atanh") else THETA_BOUNDS["log_sd"]
            for name in model.hyper_names]


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def optimize_hyper(model: LatentGaussianModel, theta0=None, grid_step: float = 1.0,
                   grid_points: int = 3, threads: int = 1, max_evals: int = 400) -> HyperResult:
    """Locate the mode of the Laplace marginal and weight a grid around it.

    Nelder-Mead (bounded) on the theta scale finds the mode. The curvature at
    the mode from central differences defines principal axes; ``grid_points``
    points on each side of the mode along each axis, spaced ``grid_step``
    standard deviations apart, are weighted by their normalized marginal values.
    """
    d = model.n_hyper
    theta0 = model.theta0 if theta0 is None else np.asarray(theta0, dtype=float)
    if d == 0:
        pt = laplace_point(np.zeros(0), model)
        return HyperResult([pt], np.ones(1), np.zeros(0), np.zeros((0, 0)), 1, [])

    cache: dict = {}
    trace: list = []
    last = {"x": None}

    def evaluate(th):
        key = tuple(np.round(th, 12))
        if key not in cache:
            try:
                pt = laplace_point(np.array(th), model, x0=last["x"])
            except InnerNewtonError as exc:
                trace.append((tuple(th), float("nan"), str(exc)))
                return None
            cache[key] = pt
            last["x"] = pt.mode
            trace.append((tuple(th), pt.log_marginal, ""))
        return cache[key]

    def objective(th):
        pt = evaluate(th)
        return 1e300 if pt is None else -pt.log_marginal

    bounds = _theta_bounds(model)
    x0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    if d == 1:
        res = opt.minimize_scalar(lambda t: objective(np.array([t])), bounds=bounds[0], method="bounded",
                                  options={"xatol": 1e-4, "maxiter": max_evals})
        theta_mode = np.array([res.x])
        ok = res.success
        # the bounded search never probes the start point; compare against it
        start = evaluate(x0)
        if start is not None and -start.log_marginal < res.fun:
            theta_mode = x0
    else:
        simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(d)[i] for i in range(d)])
        res = opt.minimize(objective, x0, method="Nelder-Mead", bounds=bounds,
                           options={"xatol": 1e-4, "fatol": 1e-6, "maxfev": max_evals,
                                    "initial_simplex": simplex})
        theta_mode = np.asarray(res.x)
        ok = res.success
    best = evaluate(theta_mode)
    if best is None or not ok:
        raise HyperOptimizationError(f"hyperparameter optimization failed: {getattr(res, 'message', '')}", trace)
    theta_mode = best.theta

    # curvature of -log marginal at the mode
    h = 0.05
    f0 = -best.log_marginal
    Hm = np.zeros((d, d))

    def fval(th):
        pt = evaluate(th)
        if pt is None:
            raise HyperOptimizationError("Laplace evaluation failed near the mode", trace)
        return -pt.log_marginal

    E = np.eye(d) * h
    for i in range(d):
        Hm[i, i] = (fval(theta_mode + E[i]) - 2 * f0 + fval(theta_mode - E[i])) / h**2
        for j in range(i):
            v = (fval(theta_mode + E[i] + E[j]) - fval(theta_mode + E[i] - E[j])
                 - fval(theta_mode - E[i] + E[j]) + fval(theta_mode - E[i] - E[j])) / (4 * h * h)
            Hm[i, j] = Hm[j, i] = v
    evals, evecs = np.linalg.eigh(Hm)
    # flat directions (boundary or weakly identified): cap the grid half-width at 3 theta units
    evals = np.maximum(evals, 1.0)
    sds = 1.0 / np.sqrt(evals)

    offsets = [np.zeros(d)]
    for j in range(d):
        for s in range(1, grid_points + 1):
            for sign in (1.0, -1.0):
                offsets.append(sign * s * grid_step * sds[j] * evecs[:, j])
    thetas = [np.clip(theta_mode + o, [b[0] for b in bounds], [b[1] for b in bounds]) for o in offsets]
    x_start = best.mode

    def grid_eval(th):
        key = tuple(np.round(th, 12))
        if key in cache:
            return cache[key]
        try:
            return laplace_point(th, model, x0=x_start)
        except InnerNewtonError as exc:
            log.warning("grid point %s skipped: %s", th, exc)
            return None

    pts = _map(grid_eval, thetas, threads)
    points = []
    seen = set()
    for p in pts:
        if p is None:
            continue
        key = tuple(np.round(p.theta, 12))
        if key in seen:
            continue
        seen.add(key)
        points.append(p)
    lm = np.array([p.log_marginal for p in points])
    w = np.exp(lm - lm.max())
    w /= w.sum()
    return HyperResult(points, w, theta_mode, Hm, len(cache) + len(points), trace)


# ------------------------------------------------------------- posterior draws

@dataclass(eq=False)
class PosteriorResult:
    """Hyperparameter points, weights and mixed latent draws.

    :ivar draws: (n_draws x n_latent) latent samples.
    :ivar draw_point: grid-point index each draw was generated at.
    """

    model: LatentGaussianModel
    thetas: np.ndarray
    weights: np.ndarray
    log_marginals: np.ndarray
    modes: np.ndarray
    draws: np.ndarray
    draw_point: np.ndarray
    provenance: dict

    @property
    def hyper_names(self):
        return self.model.hyper_names

    def draw_thetas(self):
        return self.thetas[self.draw_point]

    def hyper_mean(self, name: str, transform: str = "variance") -> float:
        """Grid-weighted posterior mean of a hyperparameter on the chosen scale."""
        j = self.model.hyper_names.index(name)
        th = self.thetas[:, j]
        vals = {"variance": np.exp(2 * th), "sd": np.exp(th), "theta": th, "rho": np.tanh(th)}[transform]
        return float(self.weights @ vals)


def sample_posterior(model: LatentGaussianModel, hyper: HyperResult, n_draws: int, seed) -> PosteriorResult:
    """Mixture draws: pick a grid point by weight, then a constrained Gaussian draw there."""
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    rng = np.random.default_rng(seed)
    K = len(hyper.points)
    idx = rng.choice(K, size=n_draws, p=hyper.weights) if K > 1 else np.zeros(n_draws, dtype=np.int64)
    z = rng.standard_normal((model.n_latent, n_draws))
    draws = np.empty((n_draws, model.n_latent))
    for k, pt in enumerate(hyper.points):
        cols = np.flatnonzero(idx == k)
        if not cols.size:
            continue
        nr = pt.newton
        x = pt.mode[None, :] + nr.factor.sample_white(z[:, cols]).T
        if model.k:
            x = nr.correction.apply(x, target=np.zeros(model.k))
        draws[cols] = x
    prov = {
        "seed": seed if isinstance(seed, (int, np.integer)) else None,
        "n_draws": n_draws,
        "newton_tol": NEWTON_TOL,
        "newton_iterations": [p.newton.iterations for p in hyper.points],
        "newton_grad_norm": [p.newton.grad_norm for p in hyper.points],
        "newton_stalled": [p.newton.stalled for p in hyper.points],
        "clamped": any(p.newton.clamped for p in hyper.points),
        "hyper_evaluations": hyper.n_evaluations,
        "inner_failures": sum(1 for t in hyper.trace if t[2]),
        "theta_mode": hyper.theta_mode.tolist(),
    }
    return PosteriorResult(
        model=model,
        thetas=hyper.thetas.reshape(K, model.n_hyper),
        weights=hyper.weights,
        log_marginals=hyper.log_marginals,
        modes=np.array([p.mode for p in hyper.points]),
        draws=draws,
        draw_point=idx.astype(np.int64),
        provenance=prov,
    )


def fit(model: LatentGaussianModel, n_draws: int = 1000, seed=0, threads: int = 1) -> PosteriorResult:
    """Optimize hyperparameters then draw from the mixed Laplace posterior."""
    t0 = time.perf_counter()
    hyper = optimize_hyper(model, threads=threads)
    res = sample_posterior(model, hyper, n_draws, seed)
    res.provenance["fit_seconds"] = time.perf_counter() - t0
    return res


# ------------------------------------------------------------- predictions

@dataclass(eq=False)
class Prediction:
    """Per-cell log-rate draws and equal-tailed quantile summaries.

    :ivar draws: (n_draws x n_cells) array.
    :ivar quantiles: (len(probs) x n_cells) array.
    """

    cells: np.ndarray
    draws: np.ndarray
    probs: tuple
    quantiles: np.ndarray

    def quantile(self, p: float) -> np.ndarray:
        return self.quantiles[self.probs.index(p)]

    @property
    def median(self):
        return self.quantile(0.5)


def summarize_draws(draws, probs=QUANTILES) -> np.ndarray:
    return np.quantile(draws, probs, axis=0)


def predict_log_rates(result: PosteriorResult, include_epsilon: bool = False, cells=None,
                      probs=QUANTILES, seed=None) -> Prediction:
    """Log-rate draws for grid cells (flat indices; default all cells).

    With ``include_epsilon`` each draw adds the cell's overdispersion
    coefficient; cells without one get a fresh draw from its prior at the
    draw's hyperparameters (seeded by ``seed`` or the fit seed).
    """
    model = result.model
    real = model.realization
    if real is None:
        raise ValueError("prediction needs a model built from a data grid")
    n_cells = real.full_design.shape[0]
    cells = np.arange(n_cells) if cells is None else np.asarray(cells, dtype=np.int64)
    base = real.design_without_epsilon()[cells]
    out = np.asarray((base @ result.draws.T).T)
    if include_epsilon and "epsilon" in real.latent_index:
        cols = real.epsilon_column[cells]
        has = cols >= 0
        out[:, has] += result.draws[:, cols[has]]
        if np.any(~has):
            s = result.provenance.get("seed") if seed is None else seed
            rng = np.random.default_rng([0 if s is None else int(s), 7919])
            th = result.draw_thetas()
            j = model.hyper_names.index("log_sd_epsilon")
            sd = np.exp(th[:, j])[:, None]
            missing = np.flatnonzero(~has)
            e = rng.standard_normal((out.shape[0], len(missing)))
            if "atanh_rho" in model.hyper_names:
                # pairs of an unobserved stratum share a correlated draw
                rho = np.tanh(th[:, model.hyper_names.index("atanh_rho")])[:, None]
                C = real.dims[3]
                strata = cells[missing] // C
                cause = cells[missing] % C
                uniq, inv = np.unique(strata, return_inverse=True)
                z = rng.standard_normal((out.shape[0], len(uniq), 2))
                z1 = z[:, :, 0]
                z2 = rho * z1 + np.sqrt(1 - rho**2) * z[:, :, 1]
                e = np.where(cause[None, :] == 0, z1[:, inv], z2[:, inv])
            out[:, missing] += sd * e
    return Prediction(cells, out, tuple(probs), summarize_draws(out, probs))
