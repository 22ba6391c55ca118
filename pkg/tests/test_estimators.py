import numpy as np
import pytest
from sklearn.base import clone

from surrogate_bridge.data import HarmonizedDataset, validate_dataset
from surrogate_bridge.estimators import (
    BiasSpecification,
    MembershipModel,
    apply_bias,
    contrast_effect,
    designs,
    efficient_influence,
    eif_complete,
    estimate_g,
    fit_membership_model,
    fit_nuisances,
    fit_outer_mean,
    one_step_estimate,
    plug_in_estimate,
    plug_in_thetas,
    project_eif,
    projection_design,
    resolve_weights,
)
from surrogate_bridge.exceptions import DomainError, PositivityError
from surrogate_bridge.glm import FitResult, fit_weighted_logistic
from surrogate_bridge.pipeline import TransportEffectEstimator, analyze


def test_apply_bias_examples():
    g = np.array([0.005])
    assert apply_bias(g, BiasSpecification(), 1)[0] == 0.005
    assert apply_bias(g, BiasSpecification(0.0, 0.0012), 1)[0] == pytest.approx(0.0062, abs=1e-15)
    assert apply_bias(g, BiasSpecification(0.001, 0.0), 0)[0] == pytest.approx(0.004, abs=1e-15)
    assert apply_bias(g, BiasSpecification(0.001, 0.0012), 0)[0] == pytest.approx(0.004, abs=1e-15)


def test_bias_specification_validation():
    assert BiasSpecification(0.0, 0.001).conservative
    assert not BiasSpecification(0.0, -0.001).conservative
    with pytest.raises(ValueError):
        BiasSpecification(float("nan"), 0.0)


@pytest.mark.parametrize("t1, ve", [(0.005, 0.0), (0.0025, 0.5), (0.0005, 0.9)])
def test_contrast_examples(t1, ve):
    e = contrast_effect(0.005, t1)
    assert e.ve == pytest.approx(ve, abs=1e-12)
    assert e.ve == pytest.approx(1 - np.exp(e.log_one_minus_ve), abs=1e-12)
    if ve == 0.5:
        assert e.log_one_minus_ve == pytest.approx(np.log(0.5))


def test_contrast_rejects_nonpositive():
    with pytest.raises(DomainError, match="theta0"):
        contrast_effect(0.005, -0.0001)


def test_bias_shift_identities_exact(small_data):
    w = resolve_weights(small_data)
    base = plug_in_thetas(small_data, w)
    for c in (0.0006, 0.0012, -0.0004):
        t0, t1 = plug_in_thetas(small_data, w, BiasSpecification(0.0, c))
        assert abs(t1 - (base[1] + c)) <= 1e-10 and abs(t0 - base[0]) <= 1e-10
        t0, t1 = plug_in_thetas(small_data, w, BiasSpecification(c, 0.0))
        assert abs(t0 - (base[0] - c)) <= 1e-10 and abs(t1 - (base[1] - c)) <= 1e-10


def test_fast_and_full_plug_in_agree(small_data):
    nuis = fit_nuisances(small_data, BiasSpecification(0.0003, 0.0006))
    fast = plug_in_thetas(small_data, nuis.weights, nuis.bias)
    slow = (plug_in_estimate(small_data, nuis, 0), plug_in_estimate(small_data, nuis, 1))
    np.testing.assert_allclose(fast, slow, rtol=1e-12)


def test_outer_mean_constant_and_linear(small_data):
    w = resolve_weights(small_data)
    const = fit_outer_mean(small_data, np.full(small_data.n, 0.007), 1, w)
    np.testing.assert_allclose(const.coefficients, [0.007, 0, 0, 0], atol=1e-14)
    lin = np.nan_to_num(small_data.x @ [0.01, -0.002, 0.003]) + 0.05
    fit = fit_outer_mean(small_data, lin, 0, w)
    np.testing.assert_allclose(fit.coefficients, [0.05, 0.01, -0.002, 0.003], atol=1e-12)


def test_plug_in_constant_and_singleton():
    nuis = type("N", (), {"mu_fits": {0: FitResult(np.array([0.007, 0.0]), True, 1, 0.0)}})()
    d = HarmonizedDataset(
        ids=[0, 1], x=[[1.0], [2.0]], z=[1, 0], a=[0, 0], eps_s=[1, 1], s=[[-1.0], [-1.2]],
        t_tilde=[90.0, np.nan], delta=[0.0, np.nan],
    )
    assert plug_in_estimate(d, nuis, 0) == pytest.approx(0.007)


def test_plug_in_permutation_invariant(small_data):
    rng = np.random.default_rng(0)
    perm = rng.permutation(small_data.n)
    a = plug_in_thetas(small_data, resolve_weights(small_data))
    shuffled = small_data.take(perm)
    b = plug_in_thetas(shuffled, resolve_weights(shuffled))
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_estimate_g_null_surrogate():
    rng = np.random.default_rng(3)
    n = 4000
    x = rng.normal(size=(n, 1))
    s = rng.normal(size=(n, 1))
    y = (rng.random(n) < 0.2).astype(float)
    d = HarmonizedDataset(
        ids=np.arange(n + 2), x=np.vstack([x, [[0.0], [0.1]]]), z=np.r_[np.ones(n), 0, 0],
        a=np.r_[np.zeros(n), 0, 1], eps_s=np.ones(n + 2), s=np.vstack([s, [[0.0], [0.1]]]),
        t_tilde=np.r_[np.where(y == 1, 10.0, 90.0), np.nan, np.nan], delta=np.r_[y, np.nan, np.nan],
    )
    fit = estimate_g(d, np.ones(d.n))
    X = designs(d).g[: n]
    mu = 1 / (1 + np.exp(-X @ fit.coefficients))
    se = np.sqrt(np.diag(np.linalg.inv((X * (mu * (1 - mu))[:, None]).T @ X)))
    assert abs(fit.coefficients[1]) < 2 * se[1]


def test_case_control_weighted_g_matches_full_cohort():
    rng = np.random.default_rng(77)
    n = 1_000_000
    beta = np.array([-14.0, -7.0, 0.69, -0.03, 0.0])
    s = -1.45 + 0.15 * rng.standard_normal(n)
    X = np.column_stack([np.ones(n), s, rng.random(n) < 0.05, rng.uniform(18, 40, n), rng.standard_normal(n)])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    full = fit_weighted_logistic(X, y)
    cases = np.flatnonzero(y == 1)
    controls = np.flatnonzero(y == 0)
    picked = rng.choice(controls, 5 * cases.size, replace=False)
    rows = np.r_[cases, picked]
    w = np.r_[np.ones(cases.size), np.full(picked.size, controls.size / picked.size)]
    cc = fit_weighted_logistic(X[rows], y[rows], w)
    mu = 1 / (1 + np.exp(-X[rows] @ cc.coefficients))
    bread = np.linalg.inv((X[rows] * (w * mu * (1 - mu))[:, None]).T @ X[rows])
    meat = (X[rows] * (w * (y[rows] - mu))[:, None]).T @ (X[rows] * (w * (y[rows] - mu))[:, None])
    se = np.sqrt(np.diag(bread @ meat @ bread))
    assert np.all(np.abs(cc.coefficients - full.coefficients) < 3 * se)


def test_membership_probabilities_sum_to_one(small_data):
    m = fit_membership_model(small_data, resolve_weights(small_data))
    p = m.probabilities(small_data)
    meas = small_data.measured
    np.testing.assert_allclose(p[meas].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isnan(p[~meas]))


def test_membership_without_signal_is_uniform():
    rng = np.random.default_rng(5)
    n = 3000
    z = np.r_[np.ones(1000), np.zeros(2000)]
    a = np.r_[np.zeros(2000), np.ones(1000)]
    y = np.r_[(rng.random(1000) < 0.3), np.zeros(2000)].astype(float)
    d = HarmonizedDataset(
        ids=np.arange(n), x=rng.normal(size=(n, 1)), z=z, a=a, eps_s=np.ones(n), s=rng.normal(size=(n, 1)),
        t_tilde=np.where(z == 1, np.where(y == 1, 10.0, 90.0), np.nan), delta=np.where(z == 1, y, np.nan),
    )
    p = fit_membership_model(d, np.ones(n)).probabilities(d)
    assert np.quantile(np.abs(p - 1 / 3), 0.99) < 0.08
    np.testing.assert_allclose(p.mean(axis=0), 1 / 3, atol=1e-6)


def test_eif_indicator_structure():
    bias = BiasSpecification(0.0002, 0.0005)
    kw = dict(
        z=np.array([0, 0, 1]), a=np.array([0, 1, 0]), y=np.array([np.nan, np.nan, 1.0]),
        g_star=np.array([0.01, 0.02, 0.03]), mu=np.array([0.011, 0.012, 0.013]), theta=0.01,
        p_z0=0.2, p_arm_x=np.full(3, 0.5), p_cell_arm=np.full(3, 0.1), p_cell_obs=np.full(3, 0.8), bias=bias,
    )
    phi = efficient_influence(arm=1, **kw)
    assert phi[0] == pytest.approx((0.011 - 0.01) / 0.2)
    assert phi[1] == pytest.approx((0.012 - 0.01) / 0.2 + (0.02 - 0.012) / (0.2 * 0.5))
    assert phi[2] == pytest.approx((0.1 / 0.8) * (1.0 + 0.0005 - 0.0002 - 0.03) / (0.2 * 0.5))
    with pytest.raises(PositivityError):
        efficient_influence(arm=1, **{**kw, "p_cell_obs": np.array([0.8, 0.8, 1.0])})
    with pytest.raises(PositivityError):
        efficient_influence(arm=1, **{**kw, "p_z0": 1.0})


def test_projection_complete_data_and_constant(small_data_full, small_data):
    nuis = fit_nuisances(small_data_full, membership=True)
    # cases and trial fully measured; controls are case-control sampled
    phi = eif_complete(small_data_full, nuis, 1, plug_in_estimate(small_data_full, nuis, 1))
    out = project_eif(small_data_full, phi, nuis)
    full = small_data_full.measured & (nuis.pi == 1)
    np.testing.assert_allclose(out[full], phi[full], atol=1e-12)
    nuis2 = fit_nuisances(small_data, membership=True)
    const = np.where(small_data.measured, 0.3, np.nan)
    np.testing.assert_allclose(project_eif(small_data, const, nuis2), 0.3, atol=1e-12)


def _strata_design(d):
    obs = d.z == 1
    y = np.nan_to_num(d.y)
    return np.column_stack([obs & (y == 1), obs & (y == 0), (~obs) & (d.a == 0), (~obs) & (d.a == 1)]).astype(float)


def test_projected_mean_equals_ips_mean_with_calibrated_design(small_data):
    nuis = fit_nuisances(small_data, membership=True)
    phi = eif_complete(small_data, nuis, 0, plug_in_estimate(small_data, nuis, 0))
    out = project_eif(small_data, phi, nuis, design=_strata_design(small_data))
    ips = np.nansum(np.where(small_data.measured, phi * nuis.weights, 0.0)) / small_data.n
    assert out.mean() == pytest.approx(ips, abs=1e-12)


def test_projection_is_ips_weighted(small_data):
    # With a 1/pi-weighted fit the sampled residuals cancel, leaving the full-cohort mean of the fit.
    nuis = fit_nuisances(small_data, membership=True)
    phi = eif_complete(small_data, nuis, 0, plug_in_estimate(small_data, nuis, 0))
    P = projection_design(small_data)
    m = small_data.measured
    coef = np.linalg.lstsq(P[m] * np.sqrt(nuis.weights[m])[:, None], phi[m] * np.sqrt(nuis.weights[m]), rcond=None)[0]
    out = project_eif(small_data, phi, nuis)
    np.testing.assert_allclose(out[~m], (P @ coef)[~m], rtol=1e-8, atol=1e-12)
    assert out.mean() == pytest.approx((P @ coef).mean(), rel=1e-9)


def test_one_step_identity(small_data):
    nuis = fit_nuisances(small_data, membership=True)
    for arm in (0, 1):
        r = one_step_estimate(small_data, nuis, arm, return_details=True)
        assert abs(r.theta - (r.plug_in + r.projected_eif.mean())) <= 1e-12
        assert r.plug_in == plug_in_estimate(small_data, nuis, arm)


def test_one_step_with_zero_correction_equals_plug_in(small_data, monkeypatch):
    import surrogate_bridge.estimators as est

    nuis = fit_nuisances(small_data, membership=True)
    monkeypatch.setattr(est, "project_eif", lambda d, phi, nuis: np.zeros(d.n))
    assert est.one_step_estimate(small_data, nuis, 1) == plug_in_estimate(small_data, nuis, 1)


def test_fitted_treatment_model_close_to_randomisation(small_data):
    nuis = fit_nuisances(small_data, membership=True, treatment_model="logistic")
    p = nuis.p_arm_given_x(small_data, 1)
    assert np.abs(p[small_data.z == 0] - 0.5).max() < 0.1
    a = analyze(small_data, estimator="one_step", treatment_model="logistic").effect
    b = analyze(small_data, estimator="one_step").effect
    assert a.ve == pytest.approx(b.ve, abs=0.05)


def test_estimator_api(small_data):
    est = TransportEffectEstimator(u_ct=0.0006, variance="sandwich")
    assert clone(est).get_params()["u_ct"] == 0.0006
    est.fit(small_data)
    ref = analyze(small_data, BiasSpecification(0.0, 0.0006))
    assert est.ve_ == ref.effect.ve
    assert est.ve_interval_ == ref.ve_interval
    lo, hi = est.ve_interval_
    assert lo < est.ve_ < hi
    x = small_data.x[small_data.z == 0][:5]
    mu1 = est.predict(x, arm=1)
    np.testing.assert_allclose(mu1, ref.nuisances.mu_values(small_data, 1)[small_data.z == 0][:5])
    risk = est.predict_risk(x, np.full(5, -1.3))
    assert np.all((risk > 0) & (risk < 1))
    with pytest.raises(TypeError):
        TransportEffectEstimator().fit(np.zeros((3, 2)))


def test_analyze_validates_input(small_data):
    assert validate_dataset(small_data).ok
    with pytest.raises(ValueError):
        analyze(small_data, estimator="tmle")
    with pytest.raises(ValueError):
        analyze(small_data, variance="eif")
