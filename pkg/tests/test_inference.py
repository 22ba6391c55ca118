import math

import numpy as np
import pytest
from scipy.special import expit

from surrogate_bridge.data import HarmonizedDataset
from surrogate_bridge.estimators import BiasSpecification, contrast_effect, fit_nuisances, resolve_weights
from surrogate_bridge.exceptions import EstimationError
from surrogate_bridge.inference import (
    StackedSystem,
    bootstrap_strata,
    eif_variance,
    sandwich_variance,
    stratified_bootstrap,
    wald_interval,
    wald_interval_ve,
)
from surrogate_bridge.pipeline import analyze, bootstrap_pipeline


def tiny_instance(seed=0, n_obs=140, n_arm=30, sampled=20, control_ratio=2):
    """n <= 200, one covariate; case-control sampling in z=1 and SRS per arm."""
    rng = np.random.default_rng(seed)
    n = n_obs + 2 * n_arm
    z = np.r_[np.ones(n_obs), np.zeros(2 * n_arm)]
    a = np.r_[np.zeros(n_obs + n_arm), np.ones(n_arm)]
    x = rng.normal(size=(n, 1))
    s = rng.normal(size=n) + 0.4 * a
    y = (rng.random(n) < expit(-1.2 + 1.0 * s + 0.5 * x[:, 0])).astype(float) * z
    eps = np.zeros(n)
    cases = np.flatnonzero((z == 1) & (y == 1))
    controls = np.flatnonzero((z == 1) & (y == 0))
    eps[cases] = 1
    eps[rng.choice(controls, min(control_ratio * cases.size, controls.size), replace=False)] = 1
    for arm in (0, 1):
        idx = np.flatnonzero((z == 0) & (a == arm))
        eps[rng.choice(idx, sampled, replace=False)] = 1
    return HarmonizedDataset(
        ids=np.arange(n), x=x, z=z, a=a, eps_s=eps, s=np.where(eps == 1, s, np.nan),
        t_tilde=np.where(z == 1, np.where(y == 1, 20.0, 90.0), np.nan),
        delta=np.where(z == 1, y, np.nan),
    )


def numeric_sandwich(system, nu):
    """Oracle: every Jacobian column by central differences, then W^-1 Q W^-T."""
    k = nu.size
    J = np.empty((k, k))
    for j in range(k):
        h = 1e-6 * (1 + abs(nu[j]))
        up, dn = nu.copy(), nu.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (system.mean_function(up) - system.mean_function(dn)) / (2 * h)
    H = system.estimating_functions(nu)
    Q = H.T @ H / system.n
    Winv = np.linalg.inv(-J)
    return Winv @ Q @ Winv.T


@pytest.mark.parametrize("estimate_pi", [False, True])
@pytest.mark.parametrize("seed", [0, 1])
def test_sandwich_matches_numeric_jacobian_oracle(seed, estimate_pi):
    d = tiny_instance(seed)
    assert d.n <= 200
    bias = BiasSpecification(0.01, 0.02)
    rep = sandwich_variance(d, bias=bias, estimate_pi=estimate_pi)
    system, nu = rep.extra["system"], rep.extra["nu"]
    oracle = numeric_sandwich(system, nu)
    V = rep.extra["V"]
    np.testing.assert_allclose(V, oracle, rtol=1e-4, atol=1e-4 * np.abs(oracle).max())
    np.testing.assert_allclose(V, V.T, rtol=1e-10)
    assert np.all(np.diag(V) >= 0)


def test_stacked_equations_solved_at_estimate():
    d = tiny_instance(3)
    for estimate_pi in (False, True):
        system = StackedSystem(d, estimate_pi=estimate_pi)
        nu = system.fit()
        assert np.linalg.norm(system.mean_function(nu)) <= 1e-6
    nuis = fit_nuisances(d)
    rep = sandwich_variance(d, nuis)
    th = rep.extra["nu"][[-2, -1]]
    eff = contrast_effect(*th)
    assert rep.se_log_one_minus_ve == pytest.approx(
        math.sqrt(np.array([-1 / eff.theta0, 1 / eff.theta1]) @ rep.cov_theta @ np.array([-1 / eff.theta0, 1 / eff.theta1]))
    )


def test_pi_known_matches_reduced_system_when_fully_sampled():
    d = tiny_instance(4, sampled=30, control_ratio=100)
    assert d.measured.all()
    a = sandwich_variance(d, estimate_pi=False)
    b = sandwich_variance(d, estimate_pi=True)
    assert len(b.extra["system"].strata) == 0
    np.testing.assert_allclose([a.se_theta0, a.se_theta1], [b.se_theta0, b.se_theta1], rtol=1e-8)


def test_duplicated_dataset_shrinks_se_by_root_two(small_data):
    d2 = small_data.take(np.r_[np.arange(small_data.n), np.arange(small_data.n)])
    w = resolve_weights(small_data)
    a = sandwich_variance(small_data, weights=w)
    b = sandwich_variance(d2, weights=np.r_[w, w])
    np.testing.assert_allclose(b.extra["V"], a.extra["V"], rtol=1e-8, atol=1e-14)
    assert b.se_theta0 == pytest.approx(a.se_theta0 / math.sqrt(2), rel=1e-8)
    assert b.se_log_one_minus_ve == pytest.approx(a.se_log_one_minus_ve / math.sqrt(2), rel=1e-8)


def test_bootstrap_constant_pipeline_has_zero_se(small_data):
    rep = stratified_bootstrap(small_data, lambda d, f: (0.01, 0.005), b=20)
    assert rep.se_theta0 == pytest.approx(0.0, abs=1e-15)
    assert rep.se_log_one_minus_ve == pytest.approx(0.0, abs=1e-15)
    assert rep.b_reps == 20 and rep.discarded_resamples == 0


def test_bootstrap_resamples_within_strata(small_data):
    seen = []
    stratified_bootstrap(small_data, lambda d, f: seen.append(f) or (1.0, 1.0), b=3)
    for f in seen:
        for idx in bootstrap_strata(small_data):
            assert f[idx].sum() == idx.size


def test_bootstrap_reproducible_and_order_invariant(small_data):
    w = resolve_weights(small_data)
    run = bootstrap_pipeline(small_data, w, BiasSpecification())
    a = stratified_bootstrap(small_data, run, b=30, seed=5)
    b = stratified_bootstrap(small_data, run, b=30, seed=5)
    assert a.se_log_one_minus_ve == b.se_log_one_minus_ve
    perm = np.random.default_rng(1).permutation(small_data.n)
    shuffled = small_data.take(perm)
    c = stratified_bootstrap(shuffled, bootstrap_pipeline(shuffled, w[perm], BiasSpecification()), b=30, seed=5)
    assert c.se_log_one_minus_ve == pytest.approx(a.se_log_one_minus_ve, rel=1e-9)


def test_bootstrap_discards_failures_and_aborts_when_too_many(small_data):
    calls = {"n": 0}

    def flaky(every):
        def run(d, f):
            calls["n"] += 1
            if calls["n"] % every == 0:
                raise EstimationError("boom")
            return 0.01, 0.005 + 1e-4 * calls["n"]
        return run

    rep = stratified_bootstrap(small_data, flaky(20), b=40)
    assert rep.discarded_resamples == 2
    calls["n"] = 0
    with pytest.raises(EstimationError, match="of 40"):
        stratified_bootstrap(small_data, flaky(5), b=40)


def test_bootstrap_b500_vs_b2000(small_data):
    run = bootstrap_pipeline(small_data, resolve_weights(small_data), BiasSpecification())
    a = stratified_bootstrap(small_data, run, b=500, seed=1)
    b = stratified_bootstrap(small_data, run, b=2000, seed=2)
    assert a.se_log_one_minus_ve == pytest.approx(b.se_log_one_minus_ve, rel=0.10)


def test_one_step_bootstrap_runs(small_data):
    res = analyze(small_data, estimator="one_step", variance="both", n_bootstrap=20)
    assert set(res.variances) == {"eif", "bootstrap"}
    assert res.variances["bootstrap"].se_log_one_minus_ve > 0


def test_eif_variance_examples():
    assert eif_variance(np.full(10, 3.0)).se == 0.0
    ev = eif_variance(np.array([-1.0, 1.0]), 2)
    assert ev.variance == pytest.approx(0.5)
    assert ev.se == pytest.approx(math.sqrt(0.5))
    with pytest.raises(ValueError):
        eif_variance(np.array([1.0]))


def test_wald_interval_ve_examples():
    e = contrast_effect(0.005, 0.0025)
    lo, hi = wald_interval_ve(e, 0.156)
    assert lo == pytest.approx(1 - 0.5 * math.exp(1.959964 * 0.156), abs=1e-6)
    assert (round(lo, 2), round(hi, 2)) == (0.32, 0.63)
    assert wald_interval_ve(e, 0.0) == pytest.approx((0.5, 0.5))
    with pytest.raises(ValueError):
        wald_interval_ve(e, 0.1, level=1.5)
    with pytest.raises(ValueError):
        wald_interval_ve(e, -0.1)
    assert wald_interval(1.0, 0.5, 0.9)[0] == pytest.approx(1 - 1.644854 * 0.5, abs=1e-6)


def test_eif_se_close_to_sandwich(small_data):
    sw = analyze(small_data).variance
    eif = analyze(small_data, estimator="one_step").variance
    assert eif.method == "eif"
    assert eif.se_log_one_minus_ve == pytest.approx(sw.se_log_one_minus_ve, rel=0.25)
