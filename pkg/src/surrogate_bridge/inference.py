"""Variance estimation and confidence intervals for the transport estimators.

The sandwich variance stacks every estimating equation behind the plug-in
estimator, ``nu = (beta, gamma0, gamma1, alpha, phi0, phi1)``:

* ``beta``   IPS-weighted logistic score for g in measured z=1 records,
* ``gamma_a`` IPS-weighted least-squares score for the outer mean in arm a,
* ``alpha``  stratum logits of the sampling probability (only when pi is estimated),
* ``phi_a``  mean of the outer mean over all trial records.

``V = W^-1 Q W^-T`` with ``W`` the negated mean Jacobian and ``Q`` the mean
outer product of the per-record stacked functions; ``cov(nu_hat) = V / n``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit, logit
from scipy.stats import norm

from .estimators import ZERO_BIAS, designs, resolve_weights
from .exceptions import DomainError, EstimationError, SingularDesignError

log = logging.getLogger(__name__)

MAX_DISCARD_FRACTION = 0.10


@dataclass(frozen=True)
class VarianceReport:
    se_theta0: float
    se_theta1: float
    se_log_one_minus_ve: float
    cov_theta: np.ndarray
    method: str
    b_reps: int = 0
    discarded_resamples: int = 0
    extra: dict = field(default_factory=dict, compare=False, repr=False)


def delta_log_ratio_se(theta0, theta1, cov_theta):
    """SE of log(theta1/theta0) by the delta method."""
    if not (theta0 > 0 and theta1 > 0):
        raise DomainError(f"log ratio undefined for theta0={theta0}, theta1={theta1}")
    grad = np.array([-1.0 / theta0, 1.0 / theta1])
    return float(math.sqrt(max(grad @ cov_theta @ grad, 0.0)))


def _strata(d):
    """Sampling strata: observational cases, observational controls, trial arm 0, arm 1."""
    obs = d.z == 1
    return (
        obs & (d.y == 1),
        obs & (d.y == 0),
        (d.z == 0) & (d.a == 0),
        (d.z == 0) & (d.a == 1),
    )


class StackedSystem:
    """Per-record stacked estimating functions for the plug-in estimator.

    With ``estimate_pi=False`` the sampling weights are treated as known and the
    ``alpha`` block is omitted. With ``estimate_pi=True`` each incompletely
    sampled stratum gets a free logit ``alpha_s`` for its sampling probability;
    fully sampled strata keep pi = 1 without a parameter.
    """

    def __init__(self, d, weights=None, bias=ZERO_BIAS, *, design=None, estimate_pi=False):
        self.d = d
        self.bias = bias
        self.estimate_pi = estimate_pi
        D = designs(d)
        self.Xg = D.g
        self.Xmu = D.mu
        self.y = D.y_obs
        self.obs_fit = D.obs_fit.astype(float)
        self.arm_fit = {arm: D.arm_fit[arm].astype(float) for arm in (0, 1)}
        self.rct = D.rct.astype(float)
        self.eps = d.measured.astype(float)
        self.n = d.n
        pg, pm = self.Xg.shape[1], self.Xmu.shape[1]

        self.strata = []
        if estimate_pi:
            for mask in _strata(d):
                m, tot = int(np.sum(mask & d.measured)), int(mask.sum())
                if tot and m == 0:
                    raise EstimationError("a sampling stratum has no measured records")
                if 0 < m < tot:
                    self.strata.append(mask.astype(float))
            self.known_w = None
        else:
            self.known_w = resolve_weights(d, weights, design)
        na = len(self.strata)

        sizes = [("beta", pg), ("gamma0", pm), ("gamma1", pm), ("alpha", na), ("phi0", 1), ("phi1", 1)]
        self.blocks = {}
        start = 0
        for name, size in sizes:
            self.blocks[name] = slice(start, start + size)
            start += size
        self.k = start

    # -- parameter bookkeeping

    def unpack(self, nu):
        return {name: nu[sl] for name, sl in self.blocks.items()}

    def weights(self, alpha=None):
        if not self.estimate_pi:
            return self.known_w
        pi = np.ones(self.n)
        for a_s, mask in zip(alpha, self.strata):
            pi = np.where(mask > 0, expit(a_s), pi)
        return self.eps / pi

    def fit(self, *, g_start=None):
        """Solve the stacked equations block by block; returns ``nu_hat``."""
        from .estimators import estimate_g, fit_outer_mean
        from .glm import predict

        nu = np.zeros(self.k)
        if self.estimate_pi:
            alpha = np.array([logit(np.sum(m * self.eps) / np.sum(m)) for m in self.strata])
            nu[self.blocks["alpha"]] = alpha
        else:
            alpha = None
        w = self.weights(alpha)
        g_fit = estimate_g(self.d, w, start=g_start)
        nu[self.blocks["beta"]] = g_fit.coefficients
        g = predict(g_fit, self.Xg)
        for arm in (0, 1):
            mu_fit = fit_outer_mean(self.d, g + self.bias.shift(arm), arm, w)
            nu[self.blocks[f"gamma{arm}"]] = mu_fit.coefficients
            nu[self.blocks[f"phi{arm}"]] = np.mean(self.Xmu[self.rct > 0] @ mu_fit.coefficients)
        return nu

    def nu_from_nuisances(self, nuis, theta0, theta1):
        if self.estimate_pi:
            raise ValueError("with estimated pi, obtain nu from fit()")
        nu = np.zeros(self.k)
        nu[self.blocks["beta"]] = nuis.g_fit.coefficients
        nu[self.blocks["gamma0"]] = nuis.mu_fits[0].coefficients
        nu[self.blocks["gamma1"]] = nuis.mu_fits[1].coefficients
        nu[self.blocks["phi0"]] = theta0
        nu[self.blocks["phi1"]] = theta1
        return nu

    # -- estimating functions

    def estimating_functions(self, nu):
        """(n, k) array of per-record stacked estimating functions at ``nu``."""
        p = self.unpack(nu)
        w = self.weights(p["alpha"])
        H = np.zeros((self.n, self.k))
        g = expit(self.Xg @ p["beta"])
        H[:, self.blocks["beta"]] = (self.obs_fit * w * (self.y - g))[:, None] * self.Xg
        for arm in (0, 1):
            gamma = p[f"gamma{arm}"]
            fitted = self.Xmu @ gamma
            resid = g + self.bias.shift(arm) - fitted
            H[:, self.blocks[f"gamma{arm}"]] = (self.arm_fit[arm] * w * resid)[:, None] * self.Xmu
            H[:, self.blocks[f"phi{arm}"]] = (self.rct * (fitted - p[f"phi{arm}"][0]))[:, None]
        if self.strata:
            cols = np.column_stack(
                [m * (self.eps - expit(a_s)) for a_s, m in zip(p["alpha"], self.strata)]
            )
            H[:, self.blocks["alpha"]] = cols
        return H

    def mean_function(self, nu):
        return self.estimating_functions(nu).mean(axis=0)

    def jacobian(self, nu):
        """Mean derivative of the stacked functions with respect to ``nu``.

        Analytic for the GLM and mean blocks; the ``alpha`` columns use central
        differences with step ``1e-6 * (1 + |alpha_j|)``.
        """
        p = self.unpack(nu)
        w = self.weights(p["alpha"])
        n = self.n
        J = np.zeros((self.k, self.k))
        g = expit(self.Xg @ p["beta"])
        dg = g * (1.0 - g)
        bb = self.blocks["beta"]
        J[bb, bb] = -((self.Xg * (self.obs_fit * w * dg)[:, None]).T @ self.Xg) / n
        for arm in (0, 1):
            gb, fb = self.blocks[f"gamma{arm}"], self.blocks[f"phi{arm}"]
            wa = self.arm_fit[arm] * w
            J[gb, bb] = (self.Xmu * (wa * dg)[:, None]).T @ self.Xg / n
            J[gb, gb] = -((self.Xmu * wa[:, None]).T @ self.Xmu) / n
            J[fb, gb] = (self.rct @ self.Xmu) / n
            J[fb, fb] = -self.rct.sum() / n
        if self.estimate_pi:
            ab = self.blocks["alpha"]
            for j in range(ab.start, ab.stop):
                h = 1e-6 * (1.0 + abs(nu[j]))
                up, dn = nu.copy(), nu.copy()
                up[j] += h
                dn[j] -= h
                J[:, j] = (self.mean_function(up) - self.mean_function(dn)) / (2 * h)
        if not np.all(np.isfinite(J)):
            raise EstimationError("non-finite entries in the stacked Jacobian")
        return J

    def sandwich(self, nu, jacobian=None):
        """``V = W^-1 Q W^-T`` (asymptotic covariance of sqrt(n) * (nu_hat - nu))."""
        H = self.estimating_functions(nu)
        J = self.jacobian(nu) if jacobian is None else jacobian
        W = -J
        Q = H.T @ H / self.n
        try:
            lu = scipy.linalg.lu_factor(W, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
            raise SingularDesignError("stacked Jacobian W_n is singular") from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            raise SingularDesignError("stacked Jacobian W_n is singular")
        Winv_Q = scipy.linalg.lu_solve(lu, Q)
        V = scipy.linalg.lu_solve(lu, Winv_Q.T).T
        return 0.5 * (V + V.T)


def sandwich_variance(d, nuis=None, bias=None, *, weights=None, design=None, estimate_pi=False):
    """Sandwich standard errors for the plug-in (theta0, theta1) and log(1 - VE)."""
    if bias is None:
        bias = nuis.bias if nuis is not None else ZERO_BIAS
    if nuis is not None and weights is None and not estimate_pi:
        weights = nuis.weights
    system = StackedSystem(d, weights, bias, design=design, estimate_pi=estimate_pi)
    if nuis is not None and not estimate_pi:
        from .estimators import plug_in_estimate

        if nuis.bias != bias:
            raise ValueError("nuisance estimates were fitted under a different bias")
        nu = system.nu_from_nuisances(nuis, plug_in_estimate(d, nuis, 0), plug_in_estimate(d, nuis, 1))
    else:
        start = nuis.g_fit.coefficients if nuis is not None else None
        nu = system.fit(g_start=start)
    resid = np.linalg.norm(system.mean_function(nu))
    if resid > 1e-6:
        raise EstimationError(f"stacked equations not solved at nu_hat (norm {resid:.2e})")
    V = system.sandwich(nu)
    idx = [system.blocks["phi0"].start, system.blocks["phi1"].start]
    cov = V[np.ix_(idx, idx)] / system.n
    theta0, theta1 = nu[idx[0]], nu[idx[1]]
    return VarianceReport(
        se_theta0=float(math.sqrt(max(cov[0, 0], 0.0))),
        se_theta1=float(math.sqrt(max(cov[1, 1], 0.0))),
        se_log_one_minus_ve=delta_log_ratio_se(theta0, theta1, cov)
        if theta0 > 0 and theta1 > 0
        else float("nan"),
        cov_theta=cov,
        method="sandwich",
        extra={"V": V, "nu": nu, "system": system},
    )


def bootstrap_strata(d):
    """Resampling strata: observational cases and controls, trial arms 0 and 1.

    Members are listed in id order so that a resample does not depend on how
    the records happen to be ordered.
    """
    out = []
    for m in _strata(d):
        if m.any():
            idx = np.flatnonzero(m)
            out.append(idx[np.argsort(d.ids[idx], kind="stable")])
    return out


def replicate_rng(seed, index):
    """Independent counter-based stream for replicate ``index`` of a run seeded by ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def stratified_bootstrap(d, pipeline, b=500, seed=0, *, strata=None):
    """Stratified nonparametric bootstrap of a (theta0, theta1) pipeline.

    Each replicate draws records with replacement within every stratum at its
    original size and calls ``pipeline(d, freq)`` with the resulting
    multiplicity vector ``freq``. Replicates that raise
    :class:`EstimationError` or give a non-positive theta are discarded and
    counted; more than 10% discarded is an error.
    """
    if b < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    strata = bootstrap_strata(d) if strata is None else [np.asarray(s) for s in strata]
    if not strata or any(len(s) == 0 for s in strata):
        raise ValueError("bootstrap strata must be non-empty")
    draws = []
    discarded = 0
    for r in range(b):
        rng = replicate_rng(seed, r)
        freq = np.zeros(d.n)
        for idx in strata:
            freq[idx] = np.bincount(rng.integers(0, len(idx), len(idx)), minlength=len(idx))
        try:
            t0, t1 = pipeline(d, freq)
        except EstimationError as exc:
            log.debug("bootstrap replicate %d discarded: %s", r, exc)
            discarded += 1
            continue
        if not (t0 > 0 and t1 > 0):
            discarded += 1
            continue
        draws.append((t0, t1, math.log(t1 / t0)))
    if discarded > MAX_DISCARD_FRACTION * b:
        raise EstimationError(f"{discarded} of {b} bootstrap replicates failed")
    if discarded:
        log.warning("%d of %d bootstrap replicates discarded", discarded, b)
    arr = np.array(draws)
    cov = np.cov(arr[:, :2], rowvar=False, ddof=1)
    sd = arr.std(axis=0, ddof=1)
    return VarianceReport(
        se_theta0=float(sd[0]),
        se_theta1=float(sd[1]),
        se_log_one_minus_ve=float(sd[2]),
        cov_theta=cov,
        method="bootstrap",
        b_reps=b,
        discarded_resamples=discarded,
        extra={"draws": arr},
    )


@dataclass(frozen=True)
class EIFVariance:
    variance: float
    se: float


def eif_variance(values, n=None):
    """Variance of a mean-type estimator from its influence values: mean((v - vbar)^2) / n."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0] if n is None else n
    if n < 2 or v.shape[0] != n:
        raise ValueError("need influence values for n >= 2 records")
    var = float(np.mean((v - v.mean()) ** 2) / n)
    return EIFVariance(var, math.sqrt(var))


def eif_variance_report(projected0, projected1, theta0, theta1):
    """Joint influence-function variance for (theta0, theta1) and the log ratio."""
    n = len(projected0)
    v0, v1 = eif_variance(projected0, n), eif_variance(projected1, n)
    c = float(np.mean((projected0 - projected0.mean()) * (projected1 - projected1.mean())) / n)
    cov = np.array([[v0.variance, c], [c, v1.variance]])
    se_log = delta_log_ratio_se(theta0, theta1, cov) if theta0 > 0 and theta1 > 0 else float("nan")
    return VarianceReport(v0.se, v1.se, se_log, cov, method="eif")


def z_quantile(level):
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2.0))


def wald_interval(point, se, level=0.95):
    q = z_quantile(level)
    return point - q * se, point + q * se


def wald_interval_ve(estimate, se_log, level=0.95):
    """Wald interval on log(1 - VE) mapped to the VE scale, returned as (lower, upper)."""
    if not se_log >= 0:
        raise ValueError(f"se_log must be non-negative, got {se_log}")
    lo, hi = wald_interval(estimate.log_one_minus_ve, se_log, level)
    return 1.0 - math.exp(hi), 1.0 - math.exp(lo)
