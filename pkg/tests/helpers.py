"""Small hand-built latent Gaussian models for engine tests."""

import numpy as np
import scipy.sparse as sp

from srsmort import gmrf
from srsmort.engine import LatentBlock, LatentGaussianModel, PCSdPrior


def random_poisson_model(seed, n_latent=20, n_obs=40, constrained=False):
    """Random sparse design, an iid block scaled by theta[0] and a fixed block."""
    rng = np.random.default_rng(seed)
    X = sp.random(n_obs, n_latent, density=0.25, random_state=rng, data_rvs=rng.standard_normal).tocsr()
    X = X + sp.csr_matrix((np.ones(n_obs), (np.arange(n_obs), rng.integers(0, n_latent, n_obs))),
                          shape=(n_obs, n_latent))
    N = rng.uniform(50, 500, n_obs)
    y = rng.poisson(N * 0.02)
    k = n_latent // 2
    blocks = [
        LatentBlock("fixed", np.arange(k), "fixed", sp.eye(k, format="csr"), eff_rank=k,
                    fixed_precision=0.5, n_total=n_latent),
        LatentBlock("iid", np.arange(k, n_latent), "scaled", sp.eye(n_latent - k, format="csr"),
                    eff_rank=n_latent - k, hyper=0, n_total=n_latent),
    ]
    A = None
    if constrained:
        A = np.zeros((1, n_latent))
        A[0, k:] = 1.0
    return LatentGaussianModel(X, y, N, blocks, constraints=A, hyper_priors=[PCSdPrior(4.6)],
                               hyper_names=["log_sd_iid"])


def gaussian_model(seed, n_latent=12, n_obs=25, constrained=False, rw2=False, walk_precision=None):
    """Gaussian-observation harness with known conjugate posterior."""
    rng = np.random.default_rng(seed)
    X = sp.csr_matrix(rng.standard_normal((n_obs, n_latent)))
    y = rng.standard_normal(n_obs)
    prec = rng.uniform(0.5, 2.0, n_obs)
    k = n_latent // 2
    if rw2:
        K = gmrf.rw2_structure(n_latent - k).structure
        eff = n_latent - k - 2
        ld = gmrf.rw2_structure(n_latent - k).logdet_plus()
    else:
        K = sp.eye(n_latent - k, format="csr")
        eff, ld = n_latent - k, 0.0
    blocks = [
        LatentBlock("fixed", np.arange(k), "fixed", sp.eye(k, format="csr"), eff_rank=k,
                    fixed_precision=0.3, n_total=n_latent),
        LatentBlock("walk", np.arange(k, n_latent), "scaled", K, eff_rank=eff, logdet_structure=ld,
                    hyper=0, n_total=n_latent),
    ]
    priors, names = [PCSdPrior(4.6)], ["log_sd_walk"]
    if walk_precision is not None:
        blocks[1] = LatentBlock("walk", np.arange(k, n_latent), "fixed", K, eff_rank=eff, logdet_structure=ld,
                                fixed_precision=walk_precision, n_total=n_latent)
        priors, names = [], []
    A = None
    if constrained:
        A = np.zeros((1, n_latent))
        A[0, k:] = 1.0
    return LatentGaussianModel(X, y, None, blocks, constraints=A, hyper_priors=priors, hyper_names=names,
                               family="gaussian", obs_precision=prec)
