"""Sparse Gaussian Markov random field structures and operations.

Precision blocks are scipy sparse matrices. Factorizations go through SuperLU
in symmetric mode with a minimum-degree ordering and no pivoting, which for a
symmetric positive definite matrix is a permuted Cholesky factorization
``Q[p][:, p] = L D L^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER = 1e-8


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Factorization met a non-positive pivot."""

    def __init__(self, index: int, pivot: float):
        self.index = index
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite: pivot {pivot:.3g} at index {index}")


@dataclass(frozen=True)
class PrecisionBlock:
    """Sparse structure matrix ``K``; the block precision is ``scale * K``.

    :ivar structure: symmetric non-negative definite CSR matrix.
    :ivar rank_deficiency: dimension of the null space of ``structure``.
    :ivar binding: name of the hyperparameter that scales the block, or None.
    """

    structure: sp.csr_matrix
    rank_deficiency: int = 0
    binding: str | None = None

    @property
    def size(self) -> int:
        return self.structure.shape[0]

    @property
    def rank(self) -> int:
        return self.size - self.rank_deficiency

    def logdet_plus(self) -> float:
        """Log of the product of the non-zero eigenvalues of ``structure``."""
        return logdet_plus(self.structure, self.rank_deficiency)


def _difference_operator(T: int, order: int) -> sp.csr_matrix:
    D = sp.eye(T, format="csr")
    for _ in range(order):
        D = (D[1:] - D[:-1]).tocsr()
    return D


def rw2_structure(T: int, binding: str | None = None) -> PrecisionBlock:
    """Second-order random walk structure ``D2^T D2`` of a length-``T`` walk."""
    if T < 3:
        raise ValueError(f"RW2 needs at least 3 time points, got {T}")
    D = _difference_operator(T, 2)
    return PrecisionBlock((D.T @ D).tocsr(), rank_deficiency=2, binding=binding)


def rw1_structure(T: int, binding: str | None = None) -> PrecisionBlock:
    """First-order random walk structure ``D1^T D1``."""
    if T < 2:
        raise ValueError(f"RW1 needs at least 2 time points, got {T}")
    D = _difference_operator(T, 1)
    return PrecisionBlock((D.T @ D).tocsr(), rank_deficiency=1, binding=binding)


def ar1_structure(T: int, phi: float, binding: str | None = None) -> PrecisionBlock:
    """Stationary AR1 precision for unit innovation variance and lag-one coefficient ``phi``."""
    if not -1.0 < phi < 1.0:
        raise ValueError(f"AR1 coefficient must lie in (-1, 1), got {phi}")
    if T < 1:
        raise ValueError("AR1 needs at least one time point")
    main = np.full(T, 1.0 + phi * phi)
    main[0] = main[-1] = 1.0
    if T == 1:
        main[0] = 1.0 - phi * phi
    off = np.full(T - 1, -phi)
    K = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    return PrecisionBlock(K, rank_deficiency=0, binding=binding)


def iid_structure(n: int, binding: str | None = None) -> PrecisionBlock:
    return PrecisionBlock(sp.eye(n, format="csr"), rank_deficiency=0, binding=binding)


def bivariate_precision(sigma2: float, rho: float) -> np.ndarray:
    """Inverse of ``sigma2 * [[1, rho], [rho, 1]]``."""
    if not sigma2 > 0:
        raise ValueError(f"variance must be positive, got {sigma2}")
    if not abs(rho) < 1:
        raise ValueError(f"correlation must satisfy |rho| < 1, got {rho}")
    f = 1.0 / (sigma2 * (1.0 - rho * rho))
    return f * np.array([[1.0, -rho], [-rho, 1.0]])


def bivariate_block(n: int, sigma2: float, rho: float, binding: str | None = None) -> PrecisionBlock:
    """Block-diagonal precision of ``n`` independent correlated pairs.

    Pairs are stored contiguously: entries ``2h`` and ``2h + 1`` belong to stratum ``h``.
    """
    if n < 1:
        raise ValueError("need at least one pair")
    P = bivariate_precision(sigma2, rho)
    return PrecisionBlock(sp.kron(sp.eye(n), sp.csr_matrix(P), format="csr"), 0, binding)


def logdet_plus(K, rank_deficiency: int = 0) -> float:
    """Positive-part log-determinant from the largest ``n - rank_deficiency`` eigenvalues."""
    K = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
    n = K.shape[0]
    if rank_deficiency == 0:
        sign, ld = np.linalg.slogdet(K)
        if sign <= 0:
            raise NotPositiveDefiniteError(-1, float(sign))
        return float(ld)
    ev = np.linalg.eigvalsh(K)
    return float(np.sum(np.log(ev[rank_deficiency:]))) if n > rank_deficiency else 0.0


@lru_cache(maxsize=64)
def walk_logdet_plus(kind: str, T: int) -> float:
    """Cached positive-part log-determinant of a walk structure of length ``T``."""
    block = {"rw1": rw1_structure, "rw2": rw2_structure}[kind](T)
    return block.logdet_plus()


class CholFactor:
    """Sparse Cholesky factorization of a symmetric positive definite matrix.

    :ivar perm: fill-reducing ordering, ``Q[perm][:, perm] = L D L^T``.
    """

    def __init__(self, Q):
        Q = sp.csc_matrix(Q, dtype=float)
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError(f"matrix must be square, got {Q.shape}")
        self.n = n
        try:
            lu = spla.splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError:
            # SuperLU does not report where an exactly zero pivot occurred
            raise NotPositiveDefiniteError(_dense_failing_pivot(Q), 0.0) from None
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError(-1, float("nan"))
        # column j of the factored matrix is column perm[j] of Q
        self.perm = np.argsort(lu.perm_c)
        d = lu.U.diagonal()
        bad = np.flatnonzero(~(d > 0))
        if bad.size:
            k = int(bad[0])
            raise NotPositiveDefiniteError(int(self.perm[k]), float(d[k]))
        self._lu = lu
        self._Q = Q
        self._U = lu.U.tocsr()
        self._sqrt_d = np.sqrt(d)
        self._logdet = float(np.sum(np.log(d)))

    @property
    def logdet(self) -> float:
        return self._logdet

    def solve(self, b, refine: int = 0):
        """``Q^{-1} b`` with ``refine`` steps of iterative refinement."""
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        for _ in range(refine):
            x = x + self._lu.solve(b - self._Q @ x)
        return x

    def sample_white(self, z):
        """Map standard normal ``z`` (n or n x k) to draws with covariance ``Q^{-1}``."""
        z = np.asarray(z, dtype=float)
        rhs = self._sqrt_d[:, None] * z if z.ndim == 2 else self._sqrt_d * z
        y = spla.spsolve_triangular(self._U, rhs, lower=False)
        x = np.empty_like(y)
        x[self.perm] = y
        return x


def _dense_failing_pivot(Q, max_n: int = 4000) -> int:
    if Q.shape[0] > max_n:
        return -1
    _, info = sla.lapack.dpotrf(Q.toarray(), lower=1)
    return int(info) - 1 if info > 0 else -1


def chol_factor(Q) -> CholFactor:
    """Factorize a sparse SPD matrix; raises :class:`NotPositiveDefiniteError` otherwise."""
    return CholFactor(Q)


def jittered(Q, rel: float = JITTER):
    """``Q`` plus a diagonal jitter of ``rel`` times its mean diagonal."""
    Q = sp.csr_matrix(Q)
    return (Q + rel * float(Q.diagonal().mean()) * sp.eye(Q.shape[0], format="csr")).tocsr()


class ConstraintCorrection:
    """Conditioning by kriging for ``A x = e`` under precision ``Q``.

    Holds ``W = Q^{-1} A^T`` and the Cholesky factor of ``A W``.
    """

    def __init__(self, factor: CholFactor, A):
        A = sp.csr_matrix(A) if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))
        self.A = A
        self.k = A.shape[0]
        if self.k == 0:
            return
        At = A.T.toarray() if sp.issparse(A) else A.T
        if np.linalg.matrix_rank(At) < self.k:
            raise ValueError("constraint matrix is not of full row rank")
        self.W = factor.solve(At).reshape(factor.n, self.k)
        S = np.asarray(A @ self.W)
        S = 0.5 * (S + S.T)
        self._S_cho = sla.cho_factor(S)
        self.logdet_S = float(2.0 * np.sum(np.log(np.diag(self._S_cho[0]))))

    def apply(self, x, target=None):
        """Correct draws ``x`` (n or k_draws x n) so that ``A x = target``."""
        if self.k == 0:
            return x
        x = np.asarray(x, dtype=float)
        X = np.atleast_2d(x)
        resid = np.asarray(self.A @ X.T)
        if target is not None:
            resid = resid - np.asarray(target, dtype=float).reshape(-1, 1)
        X = X - (self.W @ sla.cho_solve(self._S_cho, resid)).T
        return X if x.ndim == 2 else X[0]


def constraint_logdet_AAt(A) -> float:
    if A.shape[0] == 0:
        return 0.0
    M = A @ A.T
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    return float(np.linalg.slogdet(M)[1])


def sample_gmrf_constrained(mean, Q, A=None, n_draws: int = 1, seed=None, target=None):
    """Draws from ``N(mean, Q^{-1})`` conditioned on ``A x = target`` (zero by default).

    Returns an ``(n_draws, n)`` array. ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    mean = np.asarray(mean, dtype=float)
    n = mean.shape[0]
    if Q.shape != (n, n):
        raise ValueError(f"precision shape {Q.shape} does not match mean length {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if A is None:
        A = np.zeros((0, n))
    if A.shape[1] != n:
        raise ValueError("constraint matrix width does not match mean length")
    factor = chol_factor(Q)
    corr = ConstraintCorrection(factor, A)
    z = rng.standard_normal((n, n_draws))
    x = mean[None, :] + factor.sample_white(z).T
    if corr.k:
        x = corr.apply(x, target=np.zeros(corr.k) if target is None else target)
    return x


def constrained_covariance(Q, A):
    """Dense ``Q^{-1} - Q^{-1} A^T (A Q^{-1} A^T)^{-1} A Q^{-1}``."""
    Q = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
    A = A.toarray() if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))
    Sigma = np.linalg.inv(Q)
    if A.shape[0] == 0:
        return Sigma
    SA = Sigma @ A.T
    return Sigma - SA @ np.linalg.solve(A @ SA, SA.T)


def gmrf_logdensity(x, mean, Q, rank_deficiency: int = 0) -> float:
    """Log density of ``N(mean, Q^{-1})``, improper blocks via the positive-part determinant."""
    x = np.asarray(x, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), x.shape)
    n = x.shape[0]
    if Q.shape != (n, n):
        raise ValueError(f"precision shape {Q.shape} does not match vector length {n}")
    d = x - mean
    quad = float(d @ (Q @ d))
    rank = n - rank_deficiency
    if rank_deficiency == 0 and sp.issparse(Q):
        ld = chol_factor(Q).logdet
    else:
        ld = logdet_plus(Q, rank_deficiency)
    return -0.5 * rank * LOG_2PI + 0.5 * ld - 0.5 * quad


def dump_sparsity(Q, path) -> None:
    """Write the non-zeros of ``Q`` as ``row col value`` lines."""
    C = sp.coo_matrix(Q)
    order = np.lexsort((C.col, C.row))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"% {C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for i in order:
            fh.write(f"{C.row[i]} {C.col[i]} {float(C.data[i])!r}\n")
