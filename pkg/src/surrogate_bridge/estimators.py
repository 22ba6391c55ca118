"""Transport of the observational surrogate regression into the phase 3 trial.

Pipeline for each arm ``a``:

1. ``g(x, s) = P(Y=1 | X=x, S=s, Z=1)`` by IPS-weighted logistic regression
   on measured observational records.
2. Bias-adjusted risk ``g*_a = g - u_uc + a * u_ct`` (constant bias functions).
3. Outer mean ``mu_a(x) = E[g*_a | X=x, Z=0, A=a]`` by IPS-weighted linear
   regression on measured phase 3 arm-``a`` records.
4. Plug-in ``theta_a = mean of mu_a(X)`` over *all* phase 3 records.

The one-step estimator adds the sample mean of the efficient influence function,
projected onto the always-observed variables to handle two-phase sampling.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np

from .data import compute_design_weights, sampling_probabilities
from .exceptions import DataValidationError, DomainError, PositivityError
from .glm import fit_weighted_linear, fit_weighted_logistic, predict

METHODS = ("plug_in", "one_step")


@dataclass(frozen=True)
class BiasSpecification:
    """Constant bias functions on the risk-difference scale.

    ``u_uc`` is the untreated observational-minus-trial risk gap; ``u_ct`` the
    treated-minus-control gap at fixed (X, S) in the trial.
    """

    u_uc: float = 0.0
    u_ct: float = 0.0

    def __post_init__(self):
        for name in ("u_uc", "u_ct"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, float(v))

    @property
    def conservative(self):
        """True when ``u_ct`` can only shrink the estimated effect."""
        return self.u_ct >= 0

    def shift(self, arm):
        return -self.u_uc + (self.u_ct if arm == 1 else 0.0)


ZERO_BIAS = BiasSpecification()


@dataclass(frozen=True)
class EffectEstimate:
    theta0: float
    theta1: float
    log_one_minus_ve: float
    ve: float
    method: str = "plug_in"
    bias: BiasSpecification = ZERO_BIAS


def contrast_effect(theta0, theta1, method="plug_in", bias=ZERO_BIAS):
    """Multiplicative efficacy ``1 - theta1/theta0`` and its log-scale form."""
    if not (theta0 > 0 and theta1 > 0):
        raise DomainError(
            f"log(1 - VE) undefined for theta0={theta0:.6g}, theta1={theta1:.6g}"
        )
    log_rr = math.log(theta1 / theta0)
    return EffectEstimate(
        theta0=float(theta0),
        theta1=float(theta1),
        log_one_minus_ve=log_rr,
        ve=1.0 - theta1 / theta0,
        method=method,
        bias=bias,
    )


# ---------------------------------------------------------------- design matrices

_DESIGNS = weakref.WeakKeyDictionary()


class _Designs:
    """Design matrices reused across bias points and bootstrap replicates."""

    def __init__(self, d):
        n = d.n
        meas = d.measured
        s = np.where(meas[:, None], d.s, 0.0)
        ones = np.ones((n, 1))
        self.g = np.hstack([ones, s, d.x])
        self.g_names = ("intercept",) + d.surrogate_names + d.covariate_names
        self.mu = np.hstack([ones, d.x])
        self.mu_names = ("intercept",) + d.covariate_names
        self.membership = np.hstack([ones, s, s**2, d.x])
        self.obs_fit = (d.z == 1) & meas
        self.rct = d.z == 0
        self.arm_fit = {arm: self.rct & (d.a == arm) & meas for arm in (0, 1)}
        self.y_obs = np.where(self.obs_fit, np.nan_to_num(d.y), 0.0)
        self.obs_idx = np.flatnonzero(self.obs_fit)
        self.rct_idx = np.flatnonzero(self.rct)
        self.arm_idx = {arm: np.flatnonzero(m) for arm, m in self.arm_fit.items()}
        self.mu_rct_mean = self.mu[self.rct_idx].mean(axis=0)


def designs(d):
    try:
        return _DESIGNS[d]
    except KeyError:
        out = _DESIGNS[d] = _Designs(d)
        return out


def _check_outcomes(d):
    obs = d.z == 1
    if np.any(obs & d.measured & np.isnan(d.y)):
        raise DataValidationError(
            "observational records censored before t0 cannot enter the estimators"
        )


def resolve_weights(d, weights=None, design=None):
    if weights is None:
        return compute_design_weights(d, design)
    w = np.asarray(weights, dtype=float)
    if w.shape != (d.n,):
        raise ValueError(f"weights have shape {w.shape}, expected ({d.n},)")
    if np.any(w[~d.measured] != 0):
        raise ValueError("records without S must have weight 0")
    return w


# ---------------------------------------------------------------- nuisance fits

def estimate_g(d, weights, *, freq=None, start=None):
    """IPS-weighted logistic regression of Y on (1, S, X) in measured z=1 records."""
    _check_outcomes(d)
    D = designs(d)
    w = np.where(D.obs_fit, weights, 0.0)
    if freq is not None:
        w = w * freq
    rows = w > 0
    return fit_weighted_logistic(
        D.g[rows], D.y_obs[rows], w[rows], column_names=D.g_names, start=start
    )


def apply_bias(g_values, bias, arm):
    """Shift transported risks: arm 0 by ``-u_uc``, arm 1 by ``u_ct - u_uc``."""
    if arm not in (0, 1):
        raise ValueError(f"arm must be 0 or 1, got {arm}")
    return np.asarray(g_values, dtype=float) + bias.shift(arm)


def fit_outer_mean(d, g_star_values, arm, weights, *, freq=None):
    """IPS-weighted linear regression of ``g*_arm`` on (1, X) in measured trial arm records."""
    D = designs(d)
    rows = D.arm_fit[arm]
    if not rows.any():
        raise DataValidationError(f"no measured phase 3 records in arm {arm}")
    w = weights[rows] if freq is None else weights[rows] * freq[rows]
    keep = w > 0
    g_star = np.asarray(g_star_values, dtype=float)
    if g_star.shape[0] == d.n:
        g_star = g_star[rows]
    return fit_weighted_linear(
        D.mu[rows][keep], g_star[keep], w[keep], column_names=D.mu_names
    )


def plug_in_estimate(d, nuis, arm, *, freq=None):
    """Average of the fitted arm-``arm`` outer mean over every phase 3 record."""
    D = designs(d)
    if d.n_rct == 0:
        raise DataValidationError("no phase 3 records")
    mu = predict(nuis.mu_fits[arm], D.mu[D.rct])
    if freq is None:
        return float(mu.mean())
    f = freq[D.rct]
    return float(np.dot(f, mu) / f.sum())


@dataclass(frozen=True)
class MembershipModel:
    """Nested logistic fits for P(Z=0 | X,S) and P(A=1 | X,S,Z=0)."""

    z_fit: object
    a_fit: object

    def probabilities(self, d):
        """Columns: P(Z=1,A=0 | X,S), P(Z=0,A=0 | X,S), P(Z=0,A=1 | X,S); NaN without S."""
        D = designs(d)
        pz0 = predict(self.z_fit, D.membership)
        pa1 = predict(self.a_fit, D.membership)
        out = np.column_stack([1.0 - pz0, pz0 * (1.0 - pa1), pz0 * pa1])
        out[~d.measured] = np.nan
        return out


def fit_membership_model(d, weights):
    """Cell-membership probabilities from two IPS-weighted logistic regressions.

    Uses (1, S, S^2, X) as design so that Normal surrogate laws with unequal
    variances are represented exactly on the logit scale.
    """
    D = designs(d)
    meas = d.measured
    for cell, mask in (("(z=1,a=0)", d.z == 1), ("(z=0,a=0)", D.arm_fit[0]), ("(z=0,a=1)", D.arm_fit[1])):
        if not np.any(mask & meas):
            raise DataValidationError(f"membership cell {cell} has no measured records")
    w = np.where(meas, weights, 0.0)
    names = ("intercept",) + d.surrogate_names + tuple(f"{s}^2" for s in d.surrogate_names) + d.covariate_names
    z_fit = fit_weighted_logistic(D.membership, (d.z == 0).astype(float), w, column_names=names)
    rct = D.rct & meas
    a_fit = fit_weighted_logistic(
        D.membership[rct], d.a[rct].astype(float), w[rct], column_names=names
    )
    return MembershipModel(z_fit, a_fit)


def fit_treatment_model(d):
    """Unweighted logistic regression of A on (1, X) in the trial (all records observe A, X)."""
    D = designs(d)
    return fit_weighted_logistic(D.mu[D.rct], d.a[D.rct].astype(float), None, column_names=D.mu_names)


@dataclass(frozen=True)
class NuisanceEstimates:
    """Fitted nuisance components for one dataset and one bias specification.

    ``p_a_given_x`` is either the randomization constant P(A=1 | X, Z=0) or a
    fitted logistic :class:`~surrogate_bridge.glm.FitResult`.
    """

    g_fit: object
    mu_fits: dict
    bias: BiasSpecification
    weights: np.ndarray
    pi: np.ndarray
    p_z0: float
    p_a_given_x: object = 0.5
    membership: MembershipModel | None = None
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def mu0_fit(self):
        return self.mu_fits[0]

    @property
    def mu1_fit(self):
        return self.mu_fits[1]

    def g_values(self, d):
        g = predict(self.g_fit, designs(d).g)
        return np.where(d.measured, g, np.nan)

    def g_star(self, d, arm):
        return apply_bias(self.g_values(d), self.bias, arm)

    def mu_values(self, d, arm):
        return predict(self.mu_fits[arm], designs(d).mu)

    def p_arm_given_x(self, d, arm):
        if isinstance(self.p_a_given_x, (int, float)):
            p1 = np.full(d.n, float(self.p_a_given_x))
        else:
            p1 = predict(self.p_a_given_x, designs(d).mu)
        return p1 if arm == 1 else 1.0 - p1


def fit_nuisances(
    d,
    bias=ZERO_BIAS,
    weights=None,
    *,
    design=None,
    membership=False,
    treatment_model="randomized",
    p_treat=0.5,
    g_fit=None,
):
    """Fit every nuisance needed by the plug-in (and, with ``membership``, one-step) estimator."""
    w = resolve_weights(d, weights, design)
    if weights is None:
        pi = sampling_probabilities(d, design)
    else:
        pi = np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), np.nan)
    if g_fit is None:
        g_fit = estimate_g(d, w)
    g = predict(g_fit, designs(d).g)
    mu_fits = {arm: fit_outer_mean(d, apply_bias(g, bias, arm), arm, w) for arm in (0, 1)}
    if treatment_model == "randomized":
        p_a = float(p_treat)
    elif treatment_model == "logistic":
        p_a = fit_treatment_model(d)
    else:
        raise ValueError(f"unknown treatment_model {treatment_model!r}")
    return NuisanceEstimates(
        g_fit=g_fit,
        mu_fits=mu_fits,
        bias=bias,
        weights=w,
        pi=pi,
        p_z0=d.n_rct / d.n,
        p_a_given_x=p_a,
        membership=fit_membership_model(d, w) if membership else None,
    )


def plug_in_thetas(d, weights, bias=ZERO_BIAS, *, freq=None, g_start=None):
    """(theta0, theta1) from the plug-in pipeline; ``freq`` are bootstrap multiplicities.

    Works on the fitting rows only, which keeps bootstrap replicates cheap.
    """
    _check_outcomes(d)
    D = designs(d)
    weights = np.asarray(weights, dtype=float)

    def subset_weights(idx):
        w = weights[idx] if freq is None else weights[idx] * freq[idx]
        keep = w > 0
        return idx[keep], w[keep]

    obs, w_obs = subset_weights(D.obs_idx)
    g_fit = fit_weighted_logistic(D.g[obs], D.y_obs[obs], w_obs, start=g_start)
    if freq is None:
        x_rct_mean = D.mu_rct_mean
    else:
        f_rct = freq[D.rct_idx]
        x_rct_mean = (f_rct @ D.mu[D.rct_idx]) / f_rct.sum()
    out = []
    for arm in (0, 1):
        rows, w_arm = subset_weights(D.arm_idx[arm])
        if rows.size == 0:
            raise DataValidationError(f"no measured phase 3 records in arm {arm}")
        g = predict(g_fit, D.g[rows]) + bias.shift(arm)
        mu_fit = fit_weighted_linear(D.mu[rows], g, w_arm)
        out.append(float(x_rct_mean @ mu_fit.coefficients))
    return tuple(out)


# ---------------------------------------------------------------- influence function

def _require_open_unit(name, values):
    v = np.asarray(values, dtype=float)
    bad = ~((v > 0) & (v < 1))
    if np.any(bad):
        raise PositivityError(
            f"{name} outside (0, 1) for {int(bad.sum())} records (range {np.nanmin(v):.3g}..{np.nanmax(v):.3g})"
        )


def efficient_influence(
    *, z, a, y, g_star, mu, theta, arm, p_z0, p_arm_x, p_cell_arm, p_cell_obs, bias=ZERO_BIAS
):
    """Full-data efficient influence function for ``theta_arm``, record by record.

    All arguments are arrays over the records being evaluated (``y`` may be NaN
    where ``z == 0``). ``p_cell_arm`` is P(Z=0, A=arm | X, S) and ``p_cell_obs``
    is P(Z=1, A=0 | X, S).
    """
    z = np.asarray(z)
    a = np.asarray(a)
    if not 0 < p_z0 < 1:
        raise PositivityError(f"P(Z=0) = {p_z0} outside (0, 1)")
    _require_open_unit("P(A=a | X, Z=0)", p_arm_x)
    obs = z == 1
    trial = z == 0
    out = np.where(trial, (mu - theta) / p_z0, 0.0)
    in_arm = trial & (a == arm)
    if np.any(in_arm):
        out[in_arm] += (g_star[in_arm] - mu[in_arm]) / (p_z0 * p_arm_x[in_arm])
    term1 = obs & (a == 0)
    if np.any(term1):
        _require_open_unit("P(Z=0, A=a | X, S)", p_cell_arm[term1])
        _require_open_unit("P(Z=1, A=0 | X, S)", p_cell_obs[term1])
        odds = p_cell_arm[term1] / p_cell_obs[term1]
        resid = y[term1] + arm * bias.u_ct - bias.u_uc - g_star[term1]
        out[term1] += odds * resid / (p_z0 * p_arm_x[term1])
    return out


def eif_complete(d, nuis, arm, theta):
    """Efficient influence values on measured records (NaN where S is missing)."""
    if nuis.membership is None:
        raise ValueError("nuisance estimates were fitted without the membership model")
    meas = d.measured
    cells = nuis.membership.probabilities(d)
    out = np.full(d.n, np.nan)
    out[meas] = efficient_influence(
        z=d.z[meas],
        a=d.a[meas],
        y=d.y[meas],
        g_star=nuis.g_star(d, arm)[meas],
        mu=nuis.mu_values(d, arm)[meas],
        theta=theta,
        arm=arm,
        p_z0=nuis.p_z0,
        p_arm_x=nuis.p_arm_given_x(d, arm)[meas],
        p_cell_arm=cells[meas, 1 + arm],
        p_cell_obs=cells[meas, 0],
        bias=nuis.bias,
    )
    return out


def projection_design(d):
    """(1, X, Z, A, Z*Y): spans the four sampling strata plus covariates."""
    zy = np.where(d.z == 1, np.nan_to_num(d.y), 0.0)
    return np.column_stack([np.ones(d.n), d.x, d.z, d.a, d.z * zy])


def project_eif(d, phi, nuis, design=None):
    """Two-phase EIF: ``eps/pi * phi + (1 - eps/pi) * E[phi | eps=1, X, Z, A, Y]``.

    The conditional mean is a least-squares fit among measured records on
    ``design`` (default :func:`projection_design`), weighted by 1/pi so that
    its covariate slopes describe the full cohort rather than the sample.
    """
    meas = d.measured
    if not meas.any():
        raise DataValidationError("no measured records to project on")
    phi = np.asarray(phi, dtype=float)
    P = projection_design(d) if design is None else np.asarray(design, dtype=float)
    pi = np.asarray(nuis.pi, dtype=float)
    if np.any(~(pi[meas] > 0)):
        raise PositivityError("sampling probability not positive for a measured record")
    ratio = np.where(meas, 1.0 / np.where(meas, pi, 1.0), 0.0)
    proj = predict(fit_weighted_linear(P[meas], phi[meas], ratio[meas]), P)
    return np.where(meas, ratio * np.nan_to_num(phi), 0.0) + (1.0 - ratio) * proj


@dataclass(frozen=True)
class OneStepResult:
    theta: float
    plug_in: float
    projected_eif: np.ndarray


def one_step_estimate(d, nuis, arm, *, return_details=False):
    """Plug-in estimate plus the sample mean of the projected influence function."""
    theta_pi = plug_in_estimate(d, nuis, arm)
    phi = eif_complete(d, nuis, arm, theta_pi)
    projected = project_eif(d, phi, nuis)
    theta = theta_pi + float(projected.mean())
    if return_details:
        return OneStepResult(theta, theta_pi, projected)
    return theta
