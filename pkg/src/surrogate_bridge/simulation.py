"""Data-generating processes and the Monte Carlo runner for the simulation studies.

Each scenario pools an untreated observational cohort with a two-arm trial.
Covariates are ``X1 ~ Bernoulli(0.05)``, ``X2 ~ Uniform(18, 40)``,
``X3 ~ N(0, 1)``; the surrogate is Normal with an arm-specific law (mean,
variance); the outcome follows a logistic model in (S, X) that is shared by
both arms, so the true ``u_ct`` is zero. S is measured on all observational
cases plus ``k`` controls per case, and on a simple random sample per arm.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .data import HarmonizedDataset
from .estimators import ZERO_BIAS, BiasSpecification, estimate_g, resolve_weights
from .exceptions import DataValidationError, EstimationError
from .inference import replicate_rng
from .pipeline import analyze
from .sensitivity import SIM2_BIAS

MAX_FAILURE_FRACTION = 0.02

BASE_COEFFICIENTS = (-17.1, -8.2, 0.69, -0.03, 0.0)
SUPP_COEFFICIENTS = (-14.0, -7.0, 0.69, -0.03, 0.0)
CONTROL_LAW = (-1.45, 0.0225)
VACCINE_LAWS = {0: CONTROL_LAW, 50: (-1.296, 0.04), 90: (-1.08, 0.0441)}
SUPP_VACCINE_LAWS = {0: CONTROL_LAW, 50: (-1.29, 0.04), 90: (-1.04, 0.0441)}


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation scenario; ``rct_sampled_per_arm=None`` measures S on every trial record."""

    name: str = "custom"
    n_obs: int = 39_000
    n_rct_per_arm: int = 3_100
    x1_prob: float = 0.05
    x2_range: tuple = (18.0, 40.0)
    s_law_control: tuple = CONTROL_LAW
    s_law_vaccine: tuple = CONTROL_LAW
    outcome_coefficients: tuple = BASE_COEFFICIENTS
    control_ratio: float = 5.0
    rct_sampled_per_arm: int | None = 500
    analysis_bias: BiasSpecification = ZERO_BIAS
    replicates: int = 800
    base_seed: int = 0
    t0: float = 90.0
    case_time: float = 45.0
    resample_zero_cases: bool = False

    def __post_init__(self):
        for law in (self.s_law_control, self.s_law_vaccine):
            if len(law) != 2 or not law[1] > 0:
                raise ValueError(f"surrogate law needs (mean, variance > 0), got {law}")
        if self.n_obs < 1 or self.n_rct_per_arm < 1 or self.replicates < 1:
            raise ValueError("counts must be positive")
        if self.rct_sampled_per_arm is not None and not 0 < self.rct_sampled_per_arm <= self.n_rct_per_arm:
            raise ValueError("rct_sampled_per_arm must lie in [1, n_rct_per_arm]")
        if len(self.outcome_coefficients) != 5:
            raise ValueError("outcome_coefficients has 5 entries (intercept, S, X1, X2, X3)")
        if not self.control_ratio >= 1:
            raise ValueError("control_ratio must be >= 1")
        if not 0 < self.case_time <= self.t0:
            raise ValueError("case_time must lie in (0, t0]")


def _seed(key):
    return zlib.crc32(key.encode("ascii"))


def _build_presets():
    out = {}
    for ve, law in VACCINE_LAWS.items():
        for s in (100, 250, 500):
            name = f"sim1-ve{ve}-s{s}"
            out[name] = ScenarioSpec(
                name=name, s_law_vaccine=law, rct_sampled_per_arm=s, base_seed=_seed(name)
            )
        for pte, tag in ((1.0, 100), (0.83, 83), (0.67, 67)):
            name = f"sim2-pte{tag}-ve{ve}"
            # Same simulated trials as the sampled=250 study; only the analysis bias differs.
            out[name] = ScenarioSpec(
                name=name,
                s_law_vaccine=law,
                rct_sampled_per_arm=250,
                analysis_bias=BiasSpecification(0.0, SIM2_BIAS[pte]),
                base_seed=_seed(f"sim1-ve{ve}-s250"),
            )
    for ve, law in SUPP_VACCINE_LAWS.items():
        name = f"supp-ve{ve}"
        out[name] = ScenarioSpec(
            name=name,
            s_law_vaccine=law,
            outcome_coefficients=SUPP_COEFFICIENTS,
            rct_sampled_per_arm=None,
            base_seed=_seed(name),
        )
    return out


PRESETS = _build_presets()


def get_preset(name, **overrides):
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides) if overrides else spec


# ---------------------------------------------------------------- data generation

def _covariates(rng, spec, n):
    lo, hi = spec.x2_range
    return np.column_stack(
        [rng.random(n) < spec.x1_prob, rng.uniform(lo, hi, n), rng.standard_normal(n)]
    ).astype(float)


def _surrogate(rng, law, n):
    mean, var = law
    return mean + math.sqrt(var) * rng.standard_normal(n)


def outcome_probability(spec, s, x):
    b = np.asarray(spec.outcome_coefficients, dtype=float)
    return expit(b[0] + b[1] * s + x @ b[2:])


def generate_trial(spec, replicate_index):
    """Simulated dataset for one replicate; a pure function of ``(spec, replicate_index)``."""
    rng = replicate_rng(spec.base_seed, replicate_index)
    n_o, m = spec.n_obs, spec.n_rct_per_arm
    for _attempt in range(100):
        x_obs = _covariates(rng, spec, n_o)
        s_obs = _surrogate(rng, spec.s_law_control, n_o)
        y = (rng.random(n_o) < outcome_probability(spec, s_obs, x_obs)).astype(float)
        if y.sum() > 0 and (1 - y).sum() > 0:
            break
        if not spec.resample_zero_cases:
            raise DataValidationError(
                f"scenario {spec.name}: no cases drawn (base_seed={spec.base_seed}, replicate={replicate_index})"
            )
    else:
        raise DataValidationError(f"scenario {spec.name}: no cases in 100 draws")
    x_rct = _covariates(rng, spec, 2 * m)
    s_rct = np.concatenate(
        [_surrogate(rng, spec.s_law_control, m), _surrogate(rng, spec.s_law_vaccine, m)]
    )
    a_rct = np.repeat([0, 1], m)

    eps_obs = y.copy()
    controls = np.flatnonzero(y == 0)
    k = min(int(round(spec.control_ratio * y.sum())), controls.size)
    eps_obs[rng.choice(controls, k, replace=False)] = 1.0
    eps_rct = np.zeros(2 * m)
    for arm in (0, 1):
        idx = np.flatnonzero(a_rct == arm)
        if spec.rct_sampled_per_arm is None:
            eps_rct[idx] = 1.0
        else:
            eps_rct[rng.choice(idx, spec.rct_sampled_per_arm, replace=False)] = 1.0

    eps = np.concatenate([eps_obs, eps_rct])
    s = np.concatenate([s_obs, s_rct])
    s[eps == 0] = np.nan
    nan_rct = np.full(2 * m, np.nan)
    return HarmonizedDataset(
        ids=np.arange(n_o + 2 * m),
        x=np.vstack([x_obs, x_rct]),
        z=np.concatenate([np.ones(n_o), np.zeros(2 * m)]),
        a=np.concatenate([np.zeros(n_o), a_rct]),
        eps_s=eps,
        s=s,
        t_tilde=np.concatenate([np.where(y == 1, spec.case_time, spec.t0), nan_rct]),
        delta=np.concatenate([y, nan_rct]),
        t0=spec.t0,
        covariate_names=("x_1", "x_2", "x_3"),
        surrogate_names=("s_1",),
        metadata={"scenario": spec.name, "replicate": int(replicate_index)},
    )


@lru_cache(maxsize=64)
def _truth(coefs, x1_prob, x2_range, law0, law1, n_mc, seed):
    spec = ScenarioSpec(
        outcome_coefficients=coefs, x1_prob=x1_prob, x2_range=x2_range,
        s_law_control=law0, s_law_vaccine=law1,
    )
    rng = np.random.Generator(np.random.Philox(seed))
    chunk = 1_000_000
    tot = np.zeros(2)
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        x = _covariates(rng, spec, n)
        zstd = rng.standard_normal(n)
        # Common random numbers: both arms share X and the standardized surrogate draw.
        for arm, (mean, var) in enumerate((law0, law1)):
            tot[arm] += outcome_probability(spec, mean + math.sqrt(var) * zstd, x).sum()
        done += n
    theta = tot / n_mc
    return float(theta[0]), float(theta[1]), float(1.0 - theta[1] / theta[0])


def true_parameters(spec, n_mc=4_000_000, seed=20240611):
    """Monte Carlo (theta0, theta1, ve) of the trial population under ``spec``."""
    if n_mc < 1_000_000:
        raise ValueError("n_mc must be at least 1e6")
    return _truth(
        tuple(map(float, spec.outcome_coefficients)),
        float(spec.x1_prob),
        tuple(map(float, spec.x2_range)),
        tuple(map(float, spec.s_law_control)),
        tuple(map(float, spec.s_law_vaccine)),
        int(n_mc),
        int(seed),
    )


# ---------------------------------------------------------------- replicate runner

@dataclass(frozen=True)
class RunSettings:
    estimator: str = "plug_in"
    variance: str = "sandwich"
    n_bootstrap: int = 200
    threshold: float = 0.3
    level: float = 0.95
    biases: tuple = ()


RAW_COLUMNS = (
    "scenario", "replicate", "base_seed", "estimator", "u_uc", "u_ct",
    "theta0", "theta1", "ve", "log_one_minus_ve",
    "se_sw_theta0", "se_sw_theta1", "se_sw_log",
    "se_bs_theta0", "se_bs_theta1", "se_bs_log",
    "ve_lower", "ve_upper", "theta0_lower", "theta0_upper", "theta1_lower", "theta1_upper",
    "success", "bs_discarded", "error",
)


def _bootstrap_seed(base_seed, index):
    return int(np.random.SeedSequence([int(base_seed), int(index), 1]).generate_state(1)[0])


def _empty_row(spec, index, settings, bias):
    row = {c: float("nan") for c in RAW_COLUMNS}
    row.update(
        scenario=spec.name, replicate=int(index), base_seed=int(spec.base_seed),
        estimator=settings.estimator, u_uc=bias.u_uc, u_ct=bias.u_ct,
        success=float("nan"), bs_discarded=0, error="",
    )
    return row


def run_one(spec, index, settings):
    """Rows (one per analysis bias) for replicate ``index``; failures give a row with ``error`` set."""
    biases = settings.biases or (spec.analysis_bias,)
    try:
        d = generate_trial(spec, index)
        w = resolve_weights(d)
        g_fit = estimate_g(d, w)
    except (EstimationError, DataValidationError) as exc:
        return [dict(_empty_row(spec, index, settings, b), error=str(exc)) for b in biases]
    rows = []
    for b in biases:
        row = _empty_row(spec, index, settings, b)
        try:
            res = analyze(
                d, b, estimator=settings.estimator, variance=settings.variance,
                level=settings.level, n_bootstrap=settings.n_bootstrap,
                seed=_bootstrap_seed(spec.base_seed, index), weights=w, g_fit=g_fit,
                validate=False,
            )
        except (EstimationError, DataValidationError) as exc:
            row["error"] = str(exc)
            rows.append(row)
            continue
        e = res.effect
        row.update(theta0=e.theta0, theta1=e.theta1, ve=e.ve, log_one_minus_ve=e.log_one_minus_ve)
        sw = res.variances.get("sandwich") or res.variances.get("eif")
        bs = res.variances.get("bootstrap")
        if sw is not None:
            row.update(se_sw_theta0=sw.se_theta0, se_sw_theta1=sw.se_theta1, se_sw_log=sw.se_log_one_minus_ve)
        if bs is not None:
            row.update(
                se_bs_theta0=bs.se_theta0, se_bs_theta1=bs.se_theta1, se_bs_log=bs.se_log_one_minus_ve,
                bs_discarded=bs.discarded_resamples,
            )
        if res.variance is not None:
            ints = res.intervals()
            row.update(
                ve_lower=ints["ve"][0], ve_upper=ints["ve"][1],
                theta0_lower=ints["theta0"][0], theta0_upper=ints["theta0"][1],
                theta1_lower=ints["theta1"][0], theta1_upper=ints["theta1"][1],
                success=float(ints["ve"][0] >= settings.threshold),
            )
        rows.append(row)
    return rows


def _run_chunk(spec, indices, settings):
    return [run_one(spec, i, settings) for i in indices]


def run_replicates(
    spec,
    estimator="plug_in",
    variance="sandwich",
    *,
    n_bootstrap=200,
    threshold=0.3,
    level=0.95,
    replicates=None,
    threads=1,
    biases=None,
    start=0,
):
    """Run replicates ``start .. start + replicates - 1`` and return their raw rows in index order.

    ``biases`` evaluates several analysis biases on the same simulated trials
    (defaults to ``spec.analysis_bias``). Failed replicates are kept as rows
    with a non-empty ``error``; more than 2% failures aborts the scenario.
    Results do not depend on ``threads``.
    """
    n = spec.replicates if replicates is None else int(replicates)
    if n < 1:
        raise ValueError("need at least one replicate")
    settings = RunSettings(estimator, variance, n_bootstrap, threshold, level, tuple(biases or ()))
    indices = list(range(start, start + n))
    threads = max(1, int(threads))
    if threads == 1:
        per_rep = _run_chunk(spec, indices, settings)
    else:
        chunks = [indices[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [spec] * threads, chunks, [settings] * threads))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        per_rep = [by_index[i] for i in indices]
    rows = [r for rep in per_rep for r in rep]
    failed = sorted({r["replicate"] for r in rows if r["error"]})
    if len(failed) > MAX_FAILURE_FRACTION * n:
        first = next(r for r in rows if r["error"])
        raise EstimationError(
            f"scenario {spec.name}: {len(failed)} of {n} replicates failed "
            f"(first: replicate {first['replicate']}, base_seed {first['base_seed']}: {first['error']})"
        )
    return rows


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True)
class ParameterMetrics:
    truth: float
    bias: float
    se_bs: float
    se_sw: float
    sd: float
    coverage: float
    mc_se: float


@dataclass(frozen=True)
class ReplicateMetrics:
    """Table-style summary of one scenario (and one analysis bias).

    For VE the bias is on the VE scale while SEs and SD refer to log(1 - VE).
    """

    scenario: str
    u_uc: float
    u_ct: float
    n_replicates: int
    n_failed: int
    theta0: ParameterMetrics
    theta1: ParameterMetrics
    ve: ParameterMetrics
    success_probability: float
    raw: tuple = field(default=(), repr=False, compare=False)

    def as_row(self):
        row = {
            "scenario": self.scenario, "u_uc": self.u_uc, "u_ct": self.u_ct,
            "n_replicates": self.n_replicates, "n_failed": self.n_failed,
        }
        for name in ("theta0", "theta1", "ve"):
            pm = getattr(self, name)
            for k in ("truth", "bias", "se_bs", "se_sw", "sd", "coverage"):
                row[f"{name}_{k}"] = getattr(pm, k)
        row["sp"] = self.success_probability
        return row


def _nanmean(v):
    v = np.asarray(v, dtype=float)
    return float(np.mean(v[np.isfinite(v)])) if np.isfinite(v).any() else float("nan")


def _coverage(lo, hi, truth):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ok = np.isfinite(lo) & np.isfinite(hi)
    if not ok.any():
        return float("nan")
    return float(np.mean((lo[ok] <= truth) & (truth <= hi[ok])))


def _param(est, truth, se_bs, se_sw, lo, hi, sd_of=None):
    est = np.asarray(est, dtype=float)
    spread = est if sd_of is None else np.asarray(sd_of, dtype=float)
    sd = float(np.std(spread, ddof=1)) if spread.size > 1 else 0.0
    return ParameterMetrics(
        truth=float(truth),
        bias=float(est.mean() - truth),
        se_bs=_nanmean(se_bs),
        se_sw=_nanmean(se_sw),
        sd=sd,
        coverage=_coverage(lo, hi, truth),
        mc_se=float(np.std(est, ddof=1) / math.sqrt(est.size)) if est.size > 1 else 0.0,
    )


def aggregate_metrics(rows, truth):
    """Summaries per (scenario, u_uc, u_ct) group; ``truth`` is ``(theta0, theta1, ve)``.

    Returns a list of :class:`ReplicateMetrics` sorted by group key; the
    result does not depend on row order.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no replicate results to aggregate")
    t0, t1, ve = truth
    groups = {}
    for r in rows:
        groups.setdefault((r["scenario"], float(r["u_uc"]), float(r["u_ct"])), []).append(r)
    out = []
    for key in sorted(groups):
        g = sorted(groups[key], key=lambda r: r["replicate"])
        ok = [r for r in g if not r["error"]]
        if not ok:
            raise ValueError(f"every replicate failed for {key}")
        col = {c: np.array([r[c] for r in ok], dtype=float) for c in RAW_COLUMNS[6:24]}
        succ = col["success"]
        out.append(ReplicateMetrics(
            scenario=key[0], u_uc=key[1], u_ct=key[2],
            n_replicates=len(ok), n_failed=len(g) - len(ok),
            theta0=_param(col["theta0"], t0, col["se_bs_theta0"], col["se_sw_theta0"],
                          col["theta0_lower"], col["theta0_upper"]),
            theta1=_param(col["theta1"], t1, col["se_bs_theta1"], col["se_sw_theta1"],
                          col["theta1_lower"], col["theta1_upper"]),
            ve=_param(col["ve"], ve, col["se_bs_log"], col["se_sw_log"],
                      col["ve_lower"], col["ve_upper"], sd_of=col["log_one_minus_ve"]),
            success_probability=_nanmean(succ),
            raw=tuple(ok),
        ))
    return out


def plot_data(rows):
    """Median VE estimate and median interval bounds per (scenario, bias) group."""
    groups = {}
    for r in rows:
        if not r["error"]:
            groups.setdefault((r["scenario"], float(r["u_uc"]), float(r["u_ct"])), []).append(r)
    if not groups:
        raise ValueError("no successful replicates")
    out = []
    for key in sorted(groups):
        g = groups[key]
        med = {c: float(np.nanmedian([r[c] for r in g])) for c in ("ve", "ve_lower", "ve_upper")}
        out.append({"scenario": key[0], "u_uc": key[1], "u_ct": key[2],
                    "median_ve": med["ve"], "median_ve_lower": med["ve_lower"],
                    "median_ve_upper": med["ve_upper"], "n": len(g)})
    return out
