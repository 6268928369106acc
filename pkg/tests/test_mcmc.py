import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import integrate

from srsmort.engine import LatentBlock, LatentGaussianModel
from srsmort.mcmc import ACCEPT_BAND, MCMCError, batch_means_se, reference_mcmc

from helpers import gaussian_model, random_poisson_model


def fixed_block_model(X, y, N, precision):
    n = X.shape[1]
    blocks = [LatentBlock("x", np.arange(n), "fixed", sp.eye(n, format="csr"), eff_rank=n,
                          fixed_precision=precision, n_total=n)]
    return LatentGaussianModel(sp.csr_matrix(X), y, N, blocks)


def test_standard_gaussian_target():
    m = fixed_block_model(np.zeros((0, 3)), np.zeros(0), np.zeros(0), 1.0)
    res = reference_mcmc(m, n_iter=20000, burn_in=2000, seed=1)
    se = batch_means_se(res.draws)
    assert np.all(np.abs(res.draws.mean(axis=0)) <= 3 * se)
    np.testing.assert_allclose(res.draws.std(axis=0), 1.0, atol=0.05)


def test_single_cell_poisson_matches_quadrature():
    y, N, prec = 5, 100.0, 0.1
    m = fixed_block_model(np.ones((1, 1)), [y], [N], prec)
    dens = lambda x: math.exp(y * x - N * math.exp(x) - 0.5 * prec * x * x + 15.0)
    z, _ = integrate.quad(dens, -12, 4, points=[math.log(y / N)])
    mean, _ = integrate.quad(lambda x: x * dens(x), -12, 4, points=[math.log(y / N)])
    mean /= z
    res = reference_mcmc(m, n_iter=40000, burn_in=4000, seed=2)
    se = batch_means_se(res.draws)[0]
    assert abs(res.draws[:, 0].mean() - mean) <= 3 * se


def test_gaussian_posterior_mean_exact():
    m = gaussian_model(5, walk_precision=2.0)
    Q = (m.X.T @ sp.diags(m.obs_precision) @ m.X).toarray() + m.prior_precision(np.zeros(0)).toarray()
    exact = np.linalg.solve(Q, m.X.T @ (m.obs_precision * m.y))
    res = reference_mcmc(m, n_iter=20000, burn_in=2000, seed=3)
    se = batch_means_se(res.draws)
    assert np.all(np.abs(res.draws.mean(axis=0) - exact) <= 4 * se)


def test_constraints_hold_on_every_draw():
    m = random_poisson_model(1, n_latent=10, n_obs=30, constrained=True)
    res = reference_mcmc(m, n_iter=2000, burn_in=1000, seed=4)
    assert np.abs(res.draws @ m.A.toarray().T).max() <= 1e-10
    assert res.thetas.shape == (2000, 1)


def test_acceptance_adapts_into_band():
    m = random_poisson_model(2, n_latent=10, n_obs=30)
    res = reference_mcmc(m, n_iter=4000, burn_in=4000, seed=5)
    lo, hi = ACCEPT_BAND
    assert lo - 0.05 <= res.burn_in_acceptance <= hi + 0.05
    assert lo - 0.1 <= res.acceptance <= hi + 0.1


def test_dimension_cap():
    m = random_poisson_model(0, n_latent=20)
    with pytest.raises(MCMCError, match="cap"):
        reference_mcmc(m, 10, 10, seed=0, max_dim=10)


def test_bad_arguments():
    m = random_poisson_model(0, n_latent=6, n_obs=10)
    with pytest.raises(ValueError):
        reference_mcmc(m, 0, 10, seed=0)


def test_deterministic_for_seed():
    m = random_poisson_model(3, n_latent=8, n_obs=20)
    a = reference_mcmc(m, 300, 200, seed=7)
    b = reference_mcmc(m, 300, 200, seed=7)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.thetas, b.thetas)


def test_batch_means_se_iid():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(100000)
    assert batch_means_se(x)[0] == pytest.approx(1 / math.sqrt(100000), rel=0.3)
    with pytest.raises(ValueError):
        batch_means_se(np.ones(10))
