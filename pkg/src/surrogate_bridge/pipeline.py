"""End-to-end analysis of one harmonized dataset, plus a scikit-learn style estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import HarmonizedDataset, validate_dataset
from .estimators import (
    METHODS,
    ZERO_BIAS,
    BiasSpecification,
    contrast_effect,
    designs,
    fit_nuisances,
    one_step_estimate,
    plug_in_estimate,
    plug_in_thetas,
)
from .glm import predict
from .inference import (
    eif_variance_report,
    sandwich_variance,
    stratified_bootstrap,
    wald_interval,
    wald_interval_ve,
)

VARIANCE_CHOICES = ("sandwich", "bootstrap", "both", "eif", "none")


@dataclass(frozen=True)
class AnalysisResult:
    effect: object
    variances: dict
    primary_variance: str | None
    level: float
    nuisances: object = field(repr=False, default=None)

    @property
    def variance(self):
        return self.variances.get(self.primary_variance)

    def intervals(self, method=None):
        """Wald intervals for theta0, theta1 and VE from the chosen variance report."""
        rep = self.variances.get(method or self.primary_variance)
        nan2 = (float("nan"), float("nan"))
        if rep is None:
            return {"theta0": nan2, "theta1": nan2, "ve": nan2}
        return {
            "theta0": wald_interval(self.effect.theta0, rep.se_theta0, self.level),
            "theta1": wald_interval(self.effect.theta1, rep.se_theta1, self.level),
            "ve": wald_interval_ve(self.effect, rep.se_log_one_minus_ve, self.level),
        }

    @property
    def ve_interval(self):
        return self.intervals()["ve"]


def bootstrap_pipeline(d, weights, bias, method="plug_in", g_start=None, **nuisance_kwargs):
    """Callable ``(d, freq) -> (theta0, theta1)`` that reruns the whole estimator."""
    if method == "plug_in":
        def run(dd, freq):
            return plug_in_thetas(dd, weights, bias, freq=freq, g_start=g_start)
    else:
        def run(dd, freq):
            idx = np.repeat(np.arange(dd.n), freq.astype(np.intp))
            sub = dd.take(idx)
            nuis = fit_nuisances(sub, bias, weights[idx], membership=True, **nuisance_kwargs)
            return one_step_estimate(sub, nuis, 0), one_step_estimate(sub, nuis, 1)
    return run


def analyze(
    d,
    bias=ZERO_BIAS,
    *,
    estimator="plug_in",
    variance="sandwich",
    level=0.95,
    n_bootstrap=500,
    seed=0,
    weights=None,
    design=None,
    estimate_pi=False,
    treatment_model="randomized",
    g_fit=None,
    validate=True,
):
    """Point estimates, standard errors and Wald intervals under one bias specification.

    For the one-step estimator the sandwich request is served by the
    influence-function variance (the stacked system describes the plug-in).
    """
    if estimator not in METHODS:
        raise ValueError(f"estimator must be one of {METHODS}, got {estimator!r}")
    if variance not in VARIANCE_CHOICES:
        raise ValueError(f"variance must be one of {VARIANCE_CHOICES}, got {variance!r}")
    if validate:
        validate_dataset(d).raise_if_invalid()
    one_step = estimator == "one_step"
    nuis = fit_nuisances(
        d,
        bias,
        weights,
        design=design,
        membership=one_step,
        treatment_model=treatment_model,
        g_fit=g_fit,
    )
    variances = {}
    if one_step:
        r0 = one_step_estimate(d, nuis, 0, return_details=True)
        r1 = one_step_estimate(d, nuis, 1, return_details=True)
        theta0, theta1 = r0.theta, r1.theta
    else:
        theta0, theta1 = plug_in_estimate(d, nuis, 0), plug_in_estimate(d, nuis, 1)
    effect = contrast_effect(theta0, theta1, method=estimator, bias=bias)

    if variance in ("sandwich", "both", "eif"):
        if one_step:
            variances["eif"] = eif_variance_report(r0.projected_eif, r1.projected_eif, theta0, theta1)
        elif variance == "eif":
            raise ValueError("influence-function variance is available for the one-step estimator")
        else:
            variances["sandwich"] = sandwich_variance(
                d, None if estimate_pi else nuis, bias, estimate_pi=estimate_pi
            )
    if variance in ("bootstrap", "both"):
        run = bootstrap_pipeline(
            d, nuis.weights, bias, estimator, g_start=nuis.g_fit.coefficients,
            treatment_model=treatment_model,
        )
        variances["bootstrap"] = stratified_bootstrap(d, run, n_bootstrap, seed)
    primary = next((m for m in ("sandwich", "eif", "bootstrap") if m in variances), None)
    return AnalysisResult(effect, variances, primary, level, nuis)


class TransportEffectEstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`analyze`.

    ``fit`` takes a :class:`~surrogate_bridge.data.HarmonizedDataset`. Fitted
    attributes end with an underscore (``theta0_``, ``ve_``, ``ve_interval_``...).

    Parameters
    ----------
    u_uc, u_ct : float
        Constant bias functions.
    estimator : {"plug_in", "one_step"}
    variance : {"sandwich", "bootstrap", "both", "eif", "none"}
    n_bootstrap : int
    level : float
        Confidence level of the Wald intervals.
    random_state : int
        Seed of the bootstrap streams.
    treatment_model : {"randomized", "logistic"}
        P(A=1 | X, Z=0): the randomization constant 0.5 or a fitted logistic.
    estimate_pi : bool
        Stack the sampling-probability equations into the sandwich.
    """

    def __init__(
        self,
        u_uc=0.0,
        u_ct=0.0,
        estimator="plug_in",
        variance="sandwich",
        n_bootstrap=500,
        level=0.95,
        random_state=0,
        treatment_model="randomized",
        estimate_pi=False,
    ):
        self.u_uc = u_uc
        self.u_ct = u_ct
        self.estimator = estimator
        self.variance = variance
        self.n_bootstrap = n_bootstrap
        self.level = level
        self.random_state = random_state
        self.treatment_model = treatment_model
        self.estimate_pi = estimate_pi

    def fit(self, X, y=None, sample_weight=None):
        if not isinstance(X, HarmonizedDataset):
            raise TypeError("fit expects a HarmonizedDataset")
        result = analyze(
            X,
            BiasSpecification(self.u_uc, self.u_ct),
            estimator=self.estimator,
            variance=self.variance,
            level=self.level,
            n_bootstrap=self.n_bootstrap,
            seed=self.random_state,
            weights=sample_weight,
            estimate_pi=self.estimate_pi,
            treatment_model=self.treatment_model,
        )
        self.result_ = result
        self.effect_ = result.effect
        self.nuisances_ = result.nuisances
        self.theta0_ = result.effect.theta0
        self.theta1_ = result.effect.theta1
        self.ve_ = result.effect.ve
        self.variance_ = result.variance
        ints = result.intervals()
        self.ve_interval_ = ints["ve"]
        self.theta_intervals_ = (ints["theta0"], ints["theta1"])
        self.n_features_in_ = X.x.shape[1]
        return self

    def predict_risk(self, X, S):
        """Transported risk g(x, s) from the observational fit."""
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        S = check_array(S, dtype=float, ensure_2d=False)
        S = S.reshape(X.shape[0], -1)
        design = np.column_stack([np.ones(X.shape[0]), S, X])
        return predict(self.nuisances_.g_fit, design)

    def predict(self, X, arm=1):
        """Fitted outer mean E[g*_arm | X] for covariate rows ``X``."""
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        design = np.column_stack([np.ones(X.shape[0]), X])
        return predict(self.nuisances_.mu_fits[arm], design)

    def score(self, X, y=None):
        """Estimated VE on a dataset (for pipelines that expect ``score``)."""
        return self.fit(X).ve_


__all__ = ["AnalysisResult", "TransportEffectEstimator", "analyze", "bootstrap_pipeline", "designs"]
