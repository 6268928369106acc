"""Reference Metropolis-adjusted Langevin sampler for small latent Gaussian models.

Used as an oracle for the Laplace engine. The latent field lives on the
constraint subspace ``x = V u`` (``V`` an orthonormal basis of ``{A x = 0}``),
so every state satisfies the constraints exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .engine import ETA_CLAMP, LatentGaussianModel, inner_newton, optimize_hyper

MAX_DIM = 200
ACCEPT_BAND = (0.5, 0.6)
HYPER_ACCEPT = 0.44


class MCMCError(RuntimeError):
    pass


@dataclass(eq=False)
class MCMCResult:
    """Post-burn-in draws.

    :ivar draws: (n_kept x n_latent) latent samples.
    :ivar thetas: (n_kept x n_hyper) hyperparameter samples.
    :ivar acceptance: post-burn-in acceptance rate of the latent moves.
    """

    draws: np.ndarray
    thetas: np.ndarray
    acceptance: float
    step_size: float
    burn_in_acceptance: float
    hyper_acceptance: np.ndarray


class _Target:
    """Log posterior of ``(u, theta)`` and the local curvature in ``u``."""

    def __init__(self, model: LatentGaussianModel):
        self.m = model
        self.V = sla.null_space(model.A.toarray()) if model.k else np.eye(model.n_latent)
        self.XV = np.asarray(model.X @ self.V)
        self.nu = self.V.shape[1]
        self._proj = []
        for b in model.blocks:
            mats = [b._embed] + ([b._embed_off] if b.kind == "bivariate" else [])
            self._proj.append((b, [self.V.T @ (M @ self.V) for M in mats]))
        # scale moves act on the penalized part of a block: (theta_j, P x_b) -> (theta_j + d, e^d P x_b)
        self.scale_moves = []
        A = model.A.toarray()
        for b in model.blocks:
            if b.kind == "fixed":
                continue
            ev, U = np.linalg.eigh(b.structure.toarray())
            Ur = U[:, ev > 1e-10 * ev.max()]
            if A.shape[0] and np.abs(A[:, b.index] @ Ur).max() > 1e-10:
                continue
            self.scale_moves.append((b.hyper, b.index, Ur @ Ur.T, Ur.shape[1]))

    def evaluate(self, u, th, curvature=True):
        """``(log density, gradient in u, Cholesky of the curvature, its log-determinant)``."""
        m = self.m
        x = self.V @ u
        eta = self.XV @ u
        if m.family == "gaussian":
            r = m.y - eta
            ll = -0.5 * float(np.sum(m.obs_precision * r * r))
            g_eta, w = m.obs_precision * r, m.obs_precision
        else:
            if np.any(eta > ETA_CLAMP):
                return -np.inf, None, None, None
            mu = m.exposure * np.exp(eta)
            ll = float(np.sum(m.y * eta - mu))
            g_eta, w = m.y - mu, mu
        lp = ll + m.log_prior_hyper(th) - m.log_constraint_mass(th)
        g = self.XV.T @ g_eta
        G = (self.XV.T * w) @ self.XV if curvature else None
        for b, mats in self._proj:
            lp += b.log_density(x, th)
            for c, M in zip(b.coefficients(th), mats):
                g -= c * (M @ u)
                if curvature:
                    G += c * M
        if not curvature:
            return lp, g, None, None
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            return -np.inf, None, None, None
        return lp, g, L, float(np.sum(np.log(np.diag(L))))

    def log_density(self, u, th):
        return self.evaluate(u, th, curvature=False)[0]

    def rescale(self, u, move, delta):
        _, idx, P, _ = move
        x = self.V @ u
        x[idx] += math.expm1(delta) * (P @ x[idx])
        return self.V.T @ x


def _proposal_mean(u, g, L, h):
    """``u + h^2/2 G^{-1} g`` for curvature ``G = L L'``."""
    return u + 0.5 * h * h * sla.cho_solve((L, True), g)


def _log_q(to, mean, L, logdet, h):
    r = (L.T @ (to - mean)) / h
    return logdet - 0.5 * float(r @ r)


def reference_mcmc(model: LatentGaussianModel, n_iter: int, burn_in: int, seed, thin: int = 1,
                   max_dim: int = MAX_DIM, init_theta=None) -> MCMCResult:
    """Metropolis-within-Gibbs sampler over the latent field and hyperparameters.

    Each iteration makes a Langevin move on the latent field, preconditioned
    by the local curvature (``X' diag(mu) X + Q(theta)`` in subspace
    coordinates, evaluated at both ends of the move), then for every
    hyperparameter a random-walk move and, for variance-scaled blocks, a joint
    move that rescales the block's penalized part with its standard deviation.
    Step sizes adapt during burn-in: the latent step toward an acceptance rate
    in ``ACCEPT_BAND``, hyperparameter steps toward ``HYPER_ACCEPT``.
    ``n_iter`` iterations follow burn-in and every ``thin``-th is kept.
    """
    if model.n_latent > max_dim:
        raise MCMCError(f"latent dimension {model.n_latent} exceeds the reference sampler cap {max_dim}")
    if n_iter < 1 or burn_in < 0 or thin < 1:
        raise ValueError("n_iter and thin must be positive, burn_in non-negative")
    rng = np.random.default_rng(seed)
    tgt = _Target(model)
    d = model.n_hyper
    if init_theta is not None:
        theta = np.asarray(init_theta, dtype=float).copy()
    elif d:
        theta = optimize_hyper(model).theta_mode.copy()
    else:
        theta = np.zeros(0)
    u = tgt.V.T @ inner_newton(theta, model).mode
    lp, g, L, ld = tgt.evaluate(u, theta)
    if not np.isfinite(lp):
        raise MCMCError("starting point has zero posterior density")

    target_acc = sum(ACCEPT_BAND) / 2
    log_h = math.log(min(1.0, 1.6 / max(tgt.nu, 1) ** (1 / 6)))
    log_s = np.full(d, math.log(0.5))
    keep = n_iter // thin
    draws = np.empty((keep, model.n_latent))
    thetas = np.empty((keep, d))
    burn_acc, accepted = [], 0
    hyper_acc = np.zeros(d)
    hyper_tries = np.zeros(d)

    for it in range(burn_in + n_iter):
        adapt = it < burn_in
        rate = 1.0 / (1.0 + it) ** 0.6

        # latent field
        h = math.exp(log_h)
        mean = _proposal_mean(u, g, L, h)
        prop = mean + h * sla.solve_triangular(L.T, rng.standard_normal(tgt.nu), lower=False)
        lp_p, g_p, L_p, ld_p = tgt.evaluate(prop, theta)
        acc = False
        if np.isfinite(lp_p):
            log_a = (lp_p - lp + _log_q(u, _proposal_mean(prop, g_p, L_p, h), L_p, ld_p, h)
                     - _log_q(prop, mean, L, ld, h))
            acc = math.log(rng.uniform()) < log_a
        if acc:
            u, lp, g, L, ld = prop, lp_p, g_p, L_p, ld_p
        if adapt:
            burn_acc.append(acc)
            log_h += rate * ((1.0 if acc else 0.0) - target_acc)
        else:
            accepted += acc

        # hyperparameters with the latent field held fixed
        for j in range(d):
            th = theta.copy()
            th[j] += math.exp(log_s[j]) * rng.standard_normal()
            lp_t = tgt.log_density(u, th)
            ok = np.isfinite(lp_t) and math.log(rng.uniform()) < lp_t - lp
            if ok:
                theta, lp = th, lp_t
            if adapt:
                log_s[j] += rate * ((1.0 if ok else 0.0) - HYPER_ACCEPT)
            else:
                hyper_acc[j] += ok
                hyper_tries[j] += 1
        # joint rescaling of a block with its log standard deviation; Jacobian exp(rank * delta)
        for move in tgt.scale_moves:
            j = move[0]
            delta = math.exp(log_s[j]) * rng.standard_normal()
            us = tgt.rescale(u, move, delta)
            th = theta.copy()
            th[j] += delta
            lp_s = tgt.log_density(us, th)
            if np.isfinite(lp_s) and math.log(rng.uniform()) < lp_s - lp + move[3] * delta:
                u, theta, lp = us, th, lp_s
        if d:
            lp, g, L, ld = tgt.evaluate(u, theta)

        if not adapt:
            k = it - burn_in
            if k % thin == 0 and k // thin < keep:
                draws[k // thin] = tgt.V @ u
                thetas[k // thin] = theta

    acc_rate = accepted / n_iter
    if not 0.05 <= acc_rate <= 0.95:
        raise MCMCError(f"acceptance rate {acc_rate:.3f} outside [0.05, 0.95] after adaptation")
    tail = burn_acc[-max(1, burn_in // 4):]
    return MCMCResult(draws, thetas, acc_rate, math.exp(log_h),
                      float(np.mean(tail)) if tail else float("nan"),
                      hyper_acc / np.maximum(hyper_tries, 1))


def batch_means_se(samples, n_batches: int = 50):
    """Monte-Carlo standard error of the mean by non-overlapping batch means (per column)."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n = (s.shape[0] // n_batches) * n_batches
    if n == 0:
        raise ValueError("not enough samples for batch means")
    b = s[:n].reshape(n_batches, -1, s.shape[1]).mean(axis=1)
    return b.std(axis=0, ddof=1) / math.sqrt(n_batches)
