import math

import numpy as np
import pytest
from scipy import integrate

from srsmort.modelspec import (
    MCHSS_FIXED_TERMS,
    ModelSpec,
    SpecError,
    VariancePrior,
    WalkSpec,
    build_design,
    default_spec,
    load_spec,
    pc_prior_rate,
    rw_group_index,
    spec_to_toml,
)


def test_mchss_design_counts():
    real = build_design(default_spec(), (6, 6, 20, 8))
    assert real.n_fixed == 113
    sizes = {k: s.stop - s.start for k, s in real.latent_index.items()}
    assert sizes == {"intercept": 1, "region": 5, "age": 5, "cause": 7, "age:cause": 35, "region:cause": 35,
                     "age:region": 25, "walks": 1440, "epsilon": 5760}
    assert real.n_walks == 72
    assert real.constraints.shape == (72, real.n_latent)


def test_intercept_only_design():
    real = build_design(ModelSpec(fixed_terms=("intercept",), walks=None, overdispersion="none"), (1, 1, 1, 1))
    np.testing.assert_array_equal(real.design.toarray(), [[1.0]])


def test_main_effects_counting():
    spec = ModelSpec(fixed_terms=("intercept", "region", "age", "cause"), walks=None, overdispersion="none")
    assert build_design(spec, (2, 2, 1, 2)).n_fixed == 4


def test_reference_cell_is_intercept_alone():
    real = build_design(default_spec(), (6, 6, 20, 8))
    row = real.full_design[0].toarray().ravel()
    fixed = np.flatnonzero(row[: real.n_fixed])
    assert fixed.tolist() == [0]


def test_constraint_rows_support_one_walk():
    real = build_design(default_spec(), (6, 6, 20, 8))
    A = real.constraints.toarray()
    sl = real.latent_index["walks"]
    v = np.zeros(real.n_latent)
    consts = np.arange(72, dtype=float) + 1.0
    v[sl] = np.repeat(consts, 20)
    np.testing.assert_allclose(A @ v, 20 * consts)
    assert np.all(A[:, : sl.start] == 0) and np.all(A[:, sl.stop:] == 0)


def test_cell_linear_predictor_sums_columns():
    real = build_design(default_spec(), (6, 6, 20, 8))
    rng = np.random.default_rng(0)
    x = rng.standard_normal(real.n_latent)
    eta = real.design @ x
    r, a, t, c = 3, 2, 7, 5
    cell = np.ravel_multi_index((r, a, t, c), (6, 6, 20, 8))
    li = real.latent_index
    wk = real.cell_walk[cell]
    expected = (x[li["intercept"]][0] + x[li["region"]][r - 1] + x[li["age"]][a - 1] + x[li["cause"]][c - 1]
                + x[li["age:cause"]][(a - 1) * 7 + c - 1] + x[li["region:cause"]][(r - 1) * 7 + c - 1]
                + x[li["age:region"]][(a - 1) * 5 + r - 1]
                + x[li["walks"]][wk * 20 + t] + x[li["epsilon"]][cell])
    assert eta[cell] == pytest.approx(expected, abs=1e-12)
    assert real.walk_keys[wk] == (r, 1, 3)


@pytest.mark.parametrize("a,c,expected", [(0, 4, (0, 2)), (2, 1, (1, 0))])
def test_rw_group_index_mchss(a, c, expected):
    # 0-based indices of age group 1 / cause 5 and age group 3 / cause 2
    assert rw_group_index(a, c) == expected


def test_rw_group_index_identity_and_bounds():
    assert rw_group_index(3, 5, None, None) == (3, 5)
    with pytest.raises(IndexError):
        rw_group_index(6, 0)


@pytest.mark.parametrize("U,alpha,rate", [(5, 0.01, 0.92103), (1, 0.01, 4.60517), (1, math.exp(-1), 1.0)])
def test_pc_prior_rate(U, alpha, rate):
    lam = pc_prior_rate(U, alpha)
    assert lam == pytest.approx(rate, abs=5e-6)
    tail, _ = integrate.quad(lambda s: lam * math.exp(-lam * s), U, np.inf)
    assert tail == pytest.approx(alpha, rel=1e-8)


@pytest.mark.parametrize("U,alpha", [(0, 0.1), (-1, 0.1), (1, 0), (1, 1)])
def test_pc_prior_rate_errors(U, alpha):
    with pytest.raises(ValueError):
        pc_prior_rate(U, alpha)


def test_spec_errors():
    with pytest.raises(SpecError):
        ModelSpec(fixed_terms=("intercept", "year"))
    with pytest.raises(SpecError):
        ModelSpec(overdispersion="negbin")
    with pytest.raises(SpecError, match="2 causes"):
        build_design(ModelSpec(walks=None, overdispersion="bivariate", fixed_terms=("intercept",)), (1, 1, 2, 3))
    with pytest.raises(SpecError, match="age_groups"):
        build_design(default_spec(), (6, 5, 20, 8))
    with pytest.raises(SpecError):
        VariancePrior("weird")


def test_bundled_spec_matches_defaults():
    spec = default_spec()
    assert spec.fixed_terms == MCHSS_FIXED_TERMS
    assert spec.walks.structure == "rw2"
    assert spec.epsilon_prior == VariancePrior("pc", 5.0, 0.01)
    assert spec.walk_prior == VariancePrior("pc", 1.0, 0.01)
    assert spec.intercept_variance == 1e6 and spec.fixed_variance == 1e3


@pytest.mark.parametrize("spec", [
    default_spec(),
    default_spec().with_gamma_priors(),
    ModelSpec(fixed_terms=("intercept", "cause"), walks=None, overdispersion="bivariate"),
    ModelSpec(walks=WalkSpec(structure="ar1", by=("region",), age_groups=None, cause_groups=None,
                             variance_by=("region",))),
])
def test_spec_toml_roundtrip(tmp_path, spec):
    p = tmp_path / "s.toml"
    p.write_text(spec_to_toml(spec))
    assert load_spec(p) == spec


def test_unmapped_walks_flagged():
    spec = ModelSpec(fixed_terms=("intercept",), walks=WalkSpec(by=("region",), age_groups=None, cause_groups=None))
    obs = np.ones((2, 1, 4, 1), bool)
    obs[1] = False
    real = build_design(spec, (2, 1, 4, 1), obs)
    assert real.unmapped_walks == (1,)
