"""Weighted GLM core: IRLS logistic regression and weighted least squares.

Both fitters accept non-negative case weights (inverse sampling probabilities
in this package) and drop zero-weight rows before any linear algebra, so rows
with unmeasured covariates may be passed as long as their weight is zero and
their design entries are finite.

The module also exposes scikit-learn compatible wrappers
(:class:`WeightedLogisticRegression`, :class:`WeightedLinearRegression`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import SeparationError, SingularDesignError

RANK_TOL = 1e-10
GRADIENT_TOL = 1e-8
MAX_ITER = 100
SEPARATION_COEF_NORM = 1e3
# |linear predictor| beyond this means a fitted probability within ~1e-13 of 0 or 1
SEPARATION_ETA = 30.0


@dataclass(frozen=True)
class FitResult:
    """Coefficients of a fitted GLM (intercept first when the design has one).

    ``final_gradient_norm`` is the Euclidean norm of the weighted score divided
    by the total weight, so it does not change when all weights are rescaled.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    design_column_names: tuple = ()
    link: str = "identity"
    tolerance: float = GRADIENT_TOL
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_coefficients(self):
        return self.coefficients.shape[0]


def _as_inputs(design, response, weights):
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(response, dtype=float).ravel()
    n = X.shape[0]
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).ravel()
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError(
            f"design has {n} rows but response has {y.shape[0]} and weights {w.shape[0]}"
        )
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design and response must be finite on positive-weight rows")
    return X, y, w


def _column_names(names, p):
    if names is None:
        return tuple(f"x{j}" for j in range(p))
    names = tuple(names)
    if len(names) != p:
        raise ValueError(f"{len(names)} column names for a design of width {p}")
    return names


def check_full_rank(design, weights=None, rtol=RANK_TOL):
    """Raise :class:`SingularDesignError` unless ``sqrt(w) * design`` has full column rank.

    Uses a column-pivoted QR factorisation; a diagonal entry of R below
    ``rtol`` times the largest one counts as a zero pivot.
    """
    X = np.asarray(design, dtype=float)
    if weights is not None:
        X = X * np.sqrt(np.asarray(weights, dtype=float))[:, None]
    n, p = X.shape
    if n < p:
        raise SingularDesignError(f"{n} positive-weight rows for {p} coefficients")
    R = scipy.linalg.qr(X, mode="r", pivoting=True, check_finite=False)[0]
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0 or diag.min() <= rtol * diag[0]:
        raise SingularDesignError(
            f"weighted design is rank deficient (pivot ratio {diag.min() / max(diag[0], 1e-300):.2e})"
        )


def _weighted_deviance(eta, y, w):
    # -2 * loglik, using log(1 + e^eta) - y * eta for the Bernoulli term
    return 2.0 * np.dot(w, np.logaddexp(0.0, eta) - y * eta)


def fit_weighted_logistic(
    design,
    response,
    weights=None,
    *,
    column_names=None,
    tol=GRADIENT_TOL,
    max_iter=MAX_ITER,
    start=None,
):
    """Weighted maximum likelihood for a logistic model by IRLS.

    Newton steps are halved while the weighted deviance increases. The fit is
    declared converged once the normalised score norm is below ``tol`` and the
    last step is negligible; otherwise ``converged=False`` is returned after
    ``max_iter`` iterations.

    Raises
    ------
    SingularDesignError
        The weighted design (positive-weight rows) is rank deficient.
    SeparationError
        A response class has no positive weight, or the coefficients diverge.
    """
    X, y, w = _as_inputs(design, response, weights)
    p = X.shape[1]
    names = _column_names(column_names, p)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("logistic response must be 0/1")
    w_pos = w[y == 1].sum()
    w_neg = w[y == 0].sum()
    if w_pos <= 0 or w_neg <= 0:
        raise SeparationError("both response classes need positive weight")
    check_full_rank(X, w)

    if start is None:
        beta = np.zeros(p)
        # Intercept-only start is far closer than zero for rare outcomes.
        ones = np.all(X == 1.0, axis=0)
        if ones.any():
            beta[np.argmax(ones)] = np.log(w_pos / w_neg)
    else:
        beta = np.array(start, dtype=float)
        if beta.shape != (p,):
            raise ValueError(f"start has shape {beta.shape}, expected ({p},)")

    w_total = w.sum()
    eta = X @ beta
    dev = _weighted_deviance(eta, y, w)
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError("weighted information matrix is singular") from exc

        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = X @ cand
            dev_c = _weighted_deviance(eta_c, y, w)
            if dev_c <= dev + 1e-12 * abs(dev) or t < 1e-10:
                break
            t *= 0.5
        step_norm = t * np.linalg.norm(step)
        beta, eta, dev = cand, eta_c, dev_c

        grad_norm = np.linalg.norm(X.T @ (w * (y - expit(eta)))) / w_total
        if np.linalg.norm(beta) > SEPARATION_COEF_NORM and grad_norm > tol:
            raise SeparationError(
                f"coefficient norm {np.linalg.norm(beta):.3g} exceeds {SEPARATION_COEF_NORM:g}"
            )
        if np.max(np.abs(eta)) > SEPARATION_ETA:
            raise SeparationError(
                "fitted probabilities are numerically 0 or 1; coefficients diverging"
            )
        if grad_norm <= tol and step_norm <= 1e-8 * (1.0 + np.linalg.norm(beta)):
            converged = True
            break

    return FitResult(
        coefficients=beta,
        converged=converged,
        iterations=it,
        final_gradient_norm=float(grad_norm),
        design_column_names=names,
        link="logit",
        tolerance=tol,
    )


def fit_weighted_linear(design, response, weights=None, *, column_names=None):
    """Weighted least squares through a pivoted QR factorisation of ``sqrt(W) X``."""
    X, y, w = _as_inputs(design, response, weights)
    p = X.shape[1]
    names = _column_names(column_names, p)
    if X.shape[0] < p:
        raise SingularDesignError(f"{X.shape[0]} positive-weight rows for {p} coefficients")
    sw = np.sqrt(w)
    Q, R, piv = scipy.linalg.qr(
        X * sw[:, None], mode="economic", pivoting=True, check_finite=False
    )
    diag = np.abs(np.diag(R))
    if diag[0] == 0 or diag.min() <= RANK_TOL * diag[0]:
        raise SingularDesignError("weighted Gram matrix is singular")
    coef_piv = scipy.linalg.solve_triangular(R, Q.T @ (y * sw), check_finite=False)
    coef = np.empty(p)
    coef[piv] = coef_piv
    resid = y - X @ coef
    grad_norm = np.linalg.norm(X.T @ (w * resid)) / w.sum()
    return FitResult(
        coefficients=coef,
        converged=True,
        iterations=1,
        final_gradient_norm=float(grad_norm),
        design_column_names=names,
        link="identity",
    )


def predict(fit, design, link=None):
    """Evaluate a fitted GLM on new rows; ``link`` defaults to the fit's own link."""
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if X.shape[0] == fit.n_coefficients else X[:, None]
    if X.shape[1] != fit.n_coefficients:
        raise ValueError(
            f"design width {X.shape[1]} does not match {fit.n_coefficients} coefficients"
        )
    eta = X @ fit.coefficients
    link = link or fit.link
    if link == "identity":
        return eta
    if link == "logit":
        return expit(eta)
    raise ValueError(f"unknown link {link!r}")


def _with_intercept(X, fit_intercept):
    return np.column_stack([np.ones(X.shape[0]), X]) if fit_intercept else X


class WeightedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Unpenalised weighted logistic regression (IRLS) with a scikit-learn interface.

    Parameters
    ----------
    fit_intercept : bool, default=True
    tol : float, default=1e-8
        Tolerance on the normalised score norm.
    max_iter : int, default=100
    """

    def __init__(self, fit_intercept=True, tol=GRADIENT_TOL, max_iter=MAX_ITER):
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if self.classes_.shape[0] != 2:
            raise ValueError("WeightedLogisticRegression needs exactly two classes")
        target = (y == self.classes_[1]).astype(float)
        self.result_ = fit_weighted_logistic(
            _with_intercept(X, self.fit_intercept),
            target,
            sample_weight,
            tol=self.tol,
            max_iter=self.max_iter,
        )
        coef = self.result_.coefficients
        self.intercept_ = np.array([coef[0]]) if self.fit_intercept else np.zeros(1)
        self.coef_ = (coef[1:] if self.fit_intercept else coef)[None, :]
        self.n_iter_ = self.result_.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        return X @ self.coef_[0] + self.intercept_[0]

    def predict_proba(self, X):
        p1 = expit(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


class WeightedLinearRegression(RegressorMixin, BaseEstimator):
    """Weighted least squares with a scikit-learn interface."""

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.result_ = fit_weighted_linear(
            _with_intercept(X, self.fit_intercept), y, sample_weight
        )
        coef = self.result_.coefficients
        self.intercept_ = float(coef[0]) if self.fit_intercept else 0.0
        self.coef_ = coef[1:] if self.fit_intercept else coef
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_
