import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srsmort import gmrf
from srsmort.data import TabulatedDataset, empirical_csmf, holdout_split, load_dataset, write_dataset
from srsmort.diagnostics import csmf_from_draws
from srsmort.engine import neg_log_posterior_latent
from srsmort.sim import multinomial_equivalence_check

from helpers import random_poisson_model

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(T=st.integers(3, 30), a=finite, b=finite)
def test_rw2_annihilates_affine(T, a, b):
    K = gmrf.rw2_structure(T).structure
    x = a + b * np.arange(T, dtype=float)
    assert np.abs(K @ x).max() <= 1e-9 * max(1.0, abs(a), abs(b) * T)


@given(n=st.integers(1, 5), s2=st.floats(1e-3, 1e3), rho=st.floats(-0.99, 0.99))
def test_bivariate_precision_inverts_covariance(n, s2, rho):
    P = gmrf.bivariate_block(n, s2, rho).structure.toarray()
    cov = np.kron(np.eye(n), s2 * np.array([[1.0, rho], [rho, 1.0]]))
    np.testing.assert_allclose(P @ cov, np.eye(2 * n), atol=1e-12 / (1 - abs(rho)))


def test_constrained_rw2_sampler_matches_kriging_covariance():
    Q = gmrf.jittered(gmrf.rw2_structure(5).structure)
    A = np.ones((1, 5))
    x = gmrf.sample_gmrf_constrained(np.zeros(5), Q, A, n_draws=100000, seed=12)
    ref = gmrf.constrained_covariance(Q, A)
    prod = x[:, :, None] * x[:, None, :]
    emp = prod.mean(axis=0)
    se = prod.std(axis=0) / np.sqrt(x.shape[0])
    assert np.all(np.abs(emp - ref) <= 3 * se + 1e-12 * np.abs(ref).max())


counts = arrays(np.int64, st.tuples(st.integers(1, 3), st.just(1), st.integers(1, 3), st.integers(1, 5)),
                elements=st.integers(0, 40))


@given(y=counts)
def test_empirical_csmf_sums_to_one(y):
    ds = TabulatedDataset(deaths=y, exposure=np.full(y.shape[:3], 100.0))
    frac, defined = empirical_csmf(ds)
    tot = frac.sum(axis=3)
    assert np.all(np.abs(tot[defined[..., 0]] - 1) <= 1e-12)


@settings(max_examples=25, deadline=None)
@given(y=counts, expo=st.floats(1.0, 1e6))
def test_dataset_roundtrip(tmp_path_factory, y, expo):
    N = np.full(y.shape[:3], expo)
    N.flat[0] = expo / 3.0
    ds = TabulatedDataset(deaths=y, exposure=N)
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(ds, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.deaths, ds.deaths)
    np.testing.assert_allclose(back.exposure, ds.exposure, rtol=1e-12)


@given(y=arrays(np.int64, st.tuples(st.integers(1, 3), st.just(1), st.integers(2, 4), st.integers(1, 3)),
                elements=st.integers(0, 40)), data=st.data())
def test_holdout_split_preserves_values(y, data):
    ds = TabulatedDataset(deaths=y, exposure=np.full(y.shape[:3], 50.0))
    year = data.draw(st.integers(0, y.shape[2] - 1))
    train, held = holdout_split(ds, year)
    np.testing.assert_array_equal(train.deaths, ds.deaths)
    np.testing.assert_array_equal(train.exposure, ds.exposure)
    assert not train.observed()[:, :, year].any()


@given(lr=arrays(float, (4, 3), elements=st.floats(-20, 0)), shift=st.floats(-30, 30))
def test_csmf_rescale_invariant(lr, shift):
    a = csmf_from_draws(lr[:, None, None, None, :]).draws
    b = csmf_from_draws(lr[:, None, None, None, :] + shift).draws
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.abs(a.sum(axis=-1) - 1).max() <= 1e-12


@given(y=st.lists(st.integers(0, 50), min_size=1, max_size=10), data=st.data())
def test_multinomial_identity_property(y, data):
    mu = data.draw(st.lists(st.floats(0.01, 100), min_size=len(y), max_size=len(y)))
    assert multinomial_equivalence_check(y, mu)[2] <= 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), t=st.floats(0.05, 0.95), theta=st.floats(-2, 2))
def test_negative_log_posterior_convex_on_segments(seed, t, theta):
    m = random_poisson_model(seed % 50, n_latent=10, n_obs=20)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(-3, 0.5, 10), rng.normal(-3, 0.5, 10)
    f = lambda x: neg_log_posterior_latent(x, np.array([theta]), m, hessian=False)[0]
    h = 1e-3
    mid = (1 - t) * a + t * b
    d = b - a
    assert f(mid + h * d) - 2 * f(mid) + f(mid - h * d) >= -1e-10 * max(1.0, abs(f(mid)))
