"""End-to-end acceptance criteria; each test records one pass/fail line."""

import dataclasses
import time

import numpy as np
import pytest

from srsmort import gmrf
from srsmort.cli import main
from srsmort.data import write_dataset
from srsmort.diagnostics import fit_residuals, holdout_evaluate, information_criteria
from srsmort.engine import LatentGaussianModel, fit, inner_newton, neg_log_posterior_latent, predict_log_rates
from srsmort.mcmc import reference_mcmc
from srsmort.modelspec import default_spec, spec_to_toml
from srsmort.sim import ScenarioConfig, gen_from_model, multinomial_equivalence_check, run_experiment

from conftest import record_acceptance, tiny_spec
from helpers import gaussian_model, random_poisson_model

pytestmark = pytest.mark.slow


def metric(report, estimator, name, **match):
    rows = [r for r in report.rows if r["metric"] == name and r["estimator"] == estimator
            and all(r[k] == v for k, v in match.items())]
    assert len(rows) == 1
    return rows[0]["value"]


def test_criterion_01_multinomial_identity():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        C = int(rng.integers(1, 11))
        worst = max(worst, multinomial_equivalence_check(rng.integers(0, 51, C), rng.uniform(0.01, 50, C))[2])
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and secs < 1.0
    record_acceptance(1, ok, f"max |diff| {worst:.2e} over 1000 instances in {secs:.2f} s")
    assert ok


def test_criterion_02_derivatives():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    h = 1e-5
    for i in range(20):
        n = int(rng.integers(4, 51))
        m = random_poisson_model(100 + i, n_latent=n, n_obs=2 * n)
        x = -3.0 + 0.3 * rng.standard_normal(n)
        th = np.array([rng.uniform(-1.5, 1.0)])
        _, g, H = neg_log_posterior_latent(x, th, m)
        H = H.toarray()
        g_fd = np.empty(n)
        H_fd = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            fp, gp, _ = neg_log_posterior_latent(x + e, th, m, hessian=False)
            fm, gm, _ = neg_log_posterior_latent(x - e, th, m, hessian=False)
            g_fd[j] = (fp - fm) / (2 * h)
            H_fd[:, j] = (gp - gm) / (2 * h)
        worst_g = max(worst_g, np.linalg.norm(g_fd - g) / np.linalg.norm(g))
        worst_h = max(worst_h, np.linalg.norm(H_fd - H) / np.linalg.norm(H))
    secs = time.perf_counter() - t0
    ok = worst_g <= 1e-6 and worst_h <= 1e-6 and secs < 10
    record_acceptance(2, ok, f"max rel error gradient {worst_g:.1e}, Hessian {worst_h:.1e}; {secs:.2f} s")
    assert ok


def test_criterion_03_laplace_exactness():
    worst_mu = worst_cov = 0.0
    for seed, n, constrained, rw2 in [(1, 10, False, False), (2, 16, True, False), (3, 24, True, True),
                                      (4, 30, False, True), (5, 30, True, False)]:
        m = gaussian_model(seed, n_latent=n, n_obs=2 * n, constrained=constrained, rw2=rw2)
        th = np.array([0.3 - 0.2 * seed])
        X = m.X.toarray()
        P = np.diag(m.obs_precision)
        Hd = X.T @ P @ X + m.prior_precision(th).toarray()
        Sigma = np.linalg.inv(Hd)
        mu = Sigma @ X.T @ P @ m.y
        nr = inner_newton(th, m)
        cov = nr.factor.solve(np.eye(n))
        if constrained:
            A = m.A.toarray()
            mu = mu - Sigma @ A.T @ np.linalg.solve(A @ Sigma @ A.T, A @ mu)
            Sigma = gmrf.constrained_covariance(Hd, A)
            W = nr.correction.W
            cov = cov - W @ np.linalg.solve(np.asarray(m.A @ W), W.T)
        worst_mu = max(worst_mu, np.abs(nr.mode - mu).max())
        worst_cov = max(worst_cov, np.abs(cov - Sigma).max())
    ok = worst_mu <= 1e-8 and worst_cov <= 1e-8
    record_acceptance(3, ok, f"max |mean diff| {worst_mu:.1e}, max |cov diff| {worst_cov:.1e} (dims 10..30)")
    assert ok


def test_criterion_04_constrained_sampling():
    t0 = time.perf_counter()
    Q = gmrf.jittered(gmrf.rw2_structure(5).structure)
    A = np.ones((1, 5))
    x = gmrf.sample_gmrf_constrained(np.zeros(5), Q, A, n_draws=100000, seed=4)
    secs = time.perf_counter() - t0
    viol = np.abs(x @ A.T).max()
    ref = gmrf.constrained_covariance(Q, A)
    prod = x[:, :, None] * x[:, None, :]
    z = np.abs(prod.mean(axis=0) - ref) / (prod.std(axis=0) / np.sqrt(x.shape[0]))
    ok = viol <= 1e-8 and z.max() <= 3 and secs < 30
    record_acceptance(4, ok, f"max |Ax| {viol:.1e}, max covariance z-score {z.max():.2f}, {secs:.1f} s")
    assert ok


def test_criterion_05_engine_vs_mcmc(tiny_data):
    model = LatentGaussianModel.from_spec(tiny_data, tiny_spec())
    lap = fit(model, n_draws=8000, seed=5)
    mc = reference_mcmc(model, n_iter=200000, burn_in=20000, seed=5, thin=10)
    cells = np.arange(tiny_data.n_cells)
    eta_l = predict_log_rates(lap, include_epsilon=True, cells=cells).draws
    eta_m = predict_log_rates(dataclasses.replace(lap, draws=mc.draws), include_epsilon=True, cells=cells).draws
    dmean = np.abs(eta_l.mean(axis=0) - eta_m.mean(axis=0)).max()
    ratio = eta_l.std(axis=0) / eta_m.std(axis=0)
    ok = dmean <= 0.05 and np.abs(ratio - 1).max() <= 0.2
    record_acceptance(5, ok, f"max |mean diff| {dmean:.4f}; sd ratio range [{ratio.min():.3f}, {ratio.max():.3f}]"
                             f"; MCMC acceptance {mc.acceptance:.2f}")
    assert ok


@pytest.fixture(scope="module")
def scenario1_report():
    cfg = ScenarioConfig.scenario1(exposures=(10000.0,), replicates=50, seed=1, n_draws=1000)
    t0 = time.perf_counter()
    rep = run_experiment(cfg)
    rep.provenance["wall_seconds"] = time.perf_counter() - t0
    return rep


def test_criterion_06_scenario1(scenario1_report):
    rep = scenario1_report
    cov_u, cov_m = metric(rep, "unified", "coverage"), metric(rep, "multistage", "coverage")
    bias_u, bias_m = metric(rep, "unified", "bias"), metric(rep, "multistage", "bias")
    secs = rep.provenance["wall_seconds"]
    checks = {
        "unified coverage in [0.92, 0.98]": 0.92 <= cov_u <= 0.98,
        "multistage at least 2 points lower": cov_m <= cov_u - 0.02,
        "|bias| <= 0.02": abs(bias_u) <= 0.02 and abs(bias_m) <= 0.02,
        "runtime < 2 h": secs < 7200,
    }
    failed = [k for k, v in checks.items() if not v]
    record_acceptance(6, not failed,
                      f"coverage unified {cov_u:.4f}, multistage {cov_m:.4f}; bias unified {bias_u:+.4f}, "
                      f"multistage {bias_m:+.4f}; {secs:.0f} s; {len(rep.failures)} failed fits"
                      + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_07_scenario2():
    t0 = time.perf_counter()
    strong = run_experiment(ScenarioConfig.scenario2(sigma2=(1.0,), rho=(0.5,), replicates=50, seed=2))
    weak = run_experiment(ScenarioConfig.scenario2(sigma2=(0.01,), rho=(0.5,), replicates=50, seed=3,
                                                   estimators=("unified",)))
    secs = time.perf_counter() - t0
    cov_m = metric(strong, "multistage", "coverage")
    cov_u = metric(strong, "unified", "coverage")
    cov_w = metric(weak, "unified", "coverage")
    checks = {
        "multistage in [0.75, 0.92]": 0.75 <= cov_m <= 0.92,
        "unified in [0.92, 0.99]": 0.92 <= cov_u <= 0.99,
        # overcoverage is accepted at low overdispersion, so only the lower bound applies there
        "unified at sigma2=0.01 >= 0.92": cov_w >= 0.92,
    }
    failed = [k for k, v in checks.items() if not v]
    record_acceptance(7, not failed,
                      f"sigma2=1, rho=0.5: multistage {cov_m:.4f}, unified {cov_u:.4f}; sigma2=0.01: unified "
                      f"{cov_w:.4f}; {secs:.0f} s" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_08_hyperparameter_recovery(scenario1_report):
    est = np.array([r["sigma2_hat"] for r in scenario1_report.records
                    if r["estimator"] == "unified" and "error" not in r])
    share = float(np.mean((est >= 0.15) & (est <= 0.26)))
    ok = len(est) == 50 and share >= 0.9
    record_acceptance(8, ok, f"{share:.0%} of {len(est)} replicates in [0.15, 0.26]; "
                             f"range [{est.min():.4f}, {est.max():.4f}]")
    assert ok


@pytest.fixture(scope="module")
def synthetic_mchss():
    spec = default_spec()
    ds, truth = gen_from_model(11, spec)
    t0 = time.perf_counter()
    model = LatentGaussianModel.from_spec(ds, spec)
    res = fit(model, n_draws=1000, seed=11)
    return ds, truth, res, time.perf_counter() - t0


def test_criterion_09_mchss_end_to_end(synthetic_mchss):
    ds, truth, res, secs = synthetic_mchss
    failures = res.provenance["inner_failures"]
    grid_complete = len(res.weights) == 1 + 2 * 3 * res.model.n_hyper
    T = ds.dims[2]
    ho = holdout_evaluate(ds, default_spec(), T - 1, n_draws=1000, seed=11)
    smooth = truth.smooth.ravel()[ho.cells]
    cov = ho.coverage(smooth)
    checks = {
        "fit < 10 min": secs < 600,
        "every grid point converged": grid_complete and failures == 0,
        "hold-out coverage 0.95 +- 0.05": 0.90 <= cov <= 1.00,
    }
    failed = [k for k, v in checks.items() if not v]
    record_acceptance(9, not failed,
                      f"fit {secs:.0f} s with {len(res.weights)} converged grid points; final-year hold-out "
                      f"coverage {cov:.4f} over {len(ho.cells)} cells"
                      + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_10_residual_calibration(synthetic_mchss):
    _, _, res, _ = synthetic_mchss
    table = fit_residuals(res)
    keep = table.expected >= 5
    r = table.residuals[keep]
    ok = abs(r.mean()) <= 0.05 and 0.85 <= r.var() <= 1.15
    record_acceptance(10, ok, f"{keep.sum()} cells with expected >= 5: mean {r.mean():+.4f}, variance {r.var():.4f}")
    assert ok


def test_criterion_11_prior_sensitivity(synthetic_mchss):
    ds, _, res, _ = synthetic_mchss
    alt = fit(LatentGaussianModel.from_spec(ds, default_spec().with_gamma_priors()), n_draws=1000, seed=11)
    a = predict_log_rates(res, include_epsilon=False).median
    b = predict_log_rates(alt, include_epsilon=False).median
    diff = np.abs(a - b)
    share = float(np.mean(diff <= 0.1))
    ok = share >= 0.99
    record_acceptance(11, ok, f"{share:.2%} of cells within 0.1; max |diff| {diff.max():.4f}")
    assert ok


def test_criterion_12_model_comparison(synthetic_mchss):
    ds, _, res, _ = synthetic_mchss
    reduced = fit(LatentGaussianModel.from_spec(ds, default_spec().without_interactions()), n_draws=1000, seed=11)
    full, red = information_criteria(res), information_criteria(reduced)
    ok = red.dic > full.dic and red.waic > full.waic
    record_acceptance(12, ok, f"DIC full {full.dic:.1f} vs reduced {red.dic:.1f}; "
                              f"WAIC full {full.waic:.1f} vs reduced {red.waic:.1f}")
    assert ok


def _run_pipelines(root, data, spec):
    common = ["--seed", "13", "--draws", "200"]
    assert main(["fit", "--data", str(data), "--spec", str(spec), *common, "--out", str(root / "fit")]) == 0
    assert main(["diagnose", "--fit", str(root / "fit"), "--out", str(root / "diag")]) == 0
    assert main(["holdout", "--data", str(data), "--spec", str(spec), *common, "--out", str(root / "holdout")]) == 0
    assert main(["simulate", "--scenario", "2", "--replicates", "2", "--seed", "13", "--draws", "50",
                 "--sigma2", "1", "--rho", "0.5", "--out", str(root / "sim")]) == 0


def test_criterion_13_determinism(tmp_path, tiny_data):
    write_dataset(tiny_data, tmp_path / "data.csv")
    (tmp_path / "spec.toml").write_text(spec_to_toml(tiny_spec()))
    _run_pipelines(tmp_path / "a", tmp_path / "data.csv", tmp_path / "spec.toml")
    _run_pipelines(tmp_path / "b", tmp_path / "data.csv", tmp_path / "spec.toml")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.suffix in (".csv", ".bin"))
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = len(files) >= 12 and not differ
    record_acceptance(13, ok, f"{len(files) - len(differ)}/{len(files)} output files byte-identical"
                              + (f"; differing: {differ}" if differ else ""))
    assert ok
