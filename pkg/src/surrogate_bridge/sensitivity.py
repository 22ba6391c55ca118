"""Sensitivity analysis over constant bias functions.

A grid of :class:`~surrogate_bridge.estimators.BiasSpecification` points is
evaluated on one dataset. The spread of VE point estimates is the ignorance
interval; the envelope of the Wald intervals is the estimated uncertainty
interval (EUI), which drives the success rule ``EUI lower bound >= threshold``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .estimators import BiasSpecification, estimate_g, resolve_weights
from .exceptions import EstimationError
from .pipeline import analyze

# Rounded Simulation Study 2 constants, stored as configured rather than recomputed.
SIM2_BIAS = {1.0: 0.0, 0.83: 0.00060, 0.67: 0.0012}


def pte_to_bias(te_target, placebo_risk, pte):
    """Magnitude of ``u_ct`` implied by a target efficacy and a surrogate PTE.

    The risk-difference effect is ``-placebo_risk * te_target``; the part not
    explained by the surrogate is ``(1 - pte)`` of it.
    """
    if not 0 < te_target < 1:
        raise ValueError(f"te_target must lie in (0, 1), got {te_target}")
    if not 0 < placebo_risk < 1:
        raise ValueError(f"placebo_risk must lie in (0, 1), got {placebo_risk}")
    if not 0 <= pte <= 1:
        raise ValueError(f"pte must lie in [0, 1], got {pte}")
    return abs(-placebo_risk * te_target * (1.0 - pte))


def bias_grid(u_uc=(0.0,), u_ct=(0.0,)):
    """Cartesian product of constant bias values."""
    pts = [BiasSpecification(a, b) for a, b in itertools.product(u_uc, u_ct)]
    if not pts:
        raise ValueError("bias grid is empty")
    return pts


def symmetric_grid(magnitude, n_points=5, conservative=False):
    """``u_ct`` values spread over ``[0, m]`` (conservative) or ``[-m, m]``."""
    lo = 0.0 if conservative else -abs(magnitude)
    return bias_grid(u_ct=np.linspace(lo, abs(magnitude), n_points))


@dataclass(frozen=True)
class GridPoint:
    bias: BiasSpecification
    effect: object
    ve_lower: float
    ve_upper: float
    se_log: float


@dataclass(frozen=True)
class SensitivityReport:
    ignorance_interval: tuple
    eui: tuple
    success: bool
    threshold: float

    def __post_init__(self):
        lo, hi = self.ignorance_interval
        elo, ehi = self.eui
        # Envelope of intervals that each contain their point estimate.
        if not (elo <= lo + 1e-12 and hi <= ehi + 1e-12):
            raise ValueError(f"EUI {self.eui} does not contain ignorance interval {self.ignorance_interval}")


@dataclass(frozen=True)
class SensitivityGrid:
    points: tuple
    level: float

    def __post_init__(self):
        if not self.points:
            raise ValueError("sensitivity grid is empty")

    @property
    def bias_points(self):
        return [p.bias for p in self.points]

    def report(self, threshold=0.3):
        ves = [p.effect.ve for p in self.points]
        ignorance = (min(ves), max(ves))
        eui = (min(p.ve_lower for p in self.points), max(p.ve_upper for p in self.points))
        return SensitivityReport(ignorance, eui, bool(eui[0] >= threshold), float(threshold))


def evaluate_success(report, threshold=None):
    """True iff the lower EUI bound is at least ``threshold`` (defaults to the report's own)."""
    t = report.threshold if threshold is None else threshold
    return bool(report.eui[0] >= t)


def colonization_bound(te_colonized, te_against_colonization):
    """Overall efficacy when the vaccine also prevents colonization."""
    if not (te_colonized < 1 and te_against_colonization < 1):
        raise ValueError("both efficacies must be below 1")
    return 1.0 - (1.0 - te_colonized) * (1.0 - te_against_colonization)


def sweep_grid(d, grid, *, level=0.95, threshold=0.3, weights=None, design=None, **analysis_kwargs):
    """Evaluate the estimator and its variance at every grid point.

    The transported regression g does not depend on the bias functions, so it
    is fitted once and shared by all points. A failing point aborts the sweep
    with an :class:`EstimationError` naming that point.

    Returns ``(SensitivityGrid, SensitivityReport)``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("bias grid is empty")
    w = resolve_weights(d, weights, design)
    g_fit = estimate_g(d, w)
    points = []
    for i, bias in enumerate(grid):
        try:
            res = analyze(
                d, bias, level=level, weights=w, g_fit=g_fit, validate=(i == 0), **analysis_kwargs
            )
            if res.variance is None:
                raise ValueError("a variance method is required for the uncertainty interval")
            lo, hi = res.ve_interval
        except EstimationError as exc:
            raise EstimationError(
                f"grid point {i} (u_uc={bias.u_uc:g}, u_ct={bias.u_ct:g}) failed: {exc}"
            ) from exc
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise EstimationError(
                f"grid point {i} (u_uc={bias.u_uc:g}, u_ct={bias.u_ct:g}) gave a non-finite interval"
            )
        points.append(GridPoint(bias, res.effect, lo, hi, res.variance.se_log_one_minus_ve))
    sg = SensitivityGrid(tuple(points), level)
    return sg, sg.report(threshold)
