"""Harmonized two-study data, outcome derivation, and two-phase sampling weights.

A :class:`HarmonizedDataset` pools an observational study (``z == 1``, all
untreated) with a randomized phase 3 trial (``z == 0``). The surrogate ``S`` is
measured on a subsample flagged by ``eps_s``; for unmeasured records the
surrogate row is stored as NaN in the columnar array and as ``None`` on the
record view, and every fit selects ``eps_s == 1`` rows before touching it.

Early failures before the surrogate visit are not modelled: every record is
taken to be event-free at the time ``S`` is measured.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import DataValidationError


def _readonly(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParticipantRecord:
    id: str
    x: tuple
    z: int
    a: int
    eps_s: int
    s: tuple | None = None
    t_tilde: float | None = None
    delta: int | None = None
    y: int | None = None


def derive_outcome(record, t0):
    """Binary target outcome by ``t0`` for an observational record.

    Returns 1 for an observed event by ``t0``, 0 when follow-up reached ``t0``
    without an event (an event recorded after ``t0`` also counts as 0), and
    ``None`` when the record was censored before ``t0``.
    """
    if record.z != 1:
        raise ValueError(f"record {record.id}: outcomes are only derived for z=1 records")
    if record.t_tilde is None or record.delta is None:
        raise ValueError(f"record {record.id}: t_tilde and delta are required")
    return _derive(float(record.t_tilde), int(record.delta), t0)


def _derive(t_tilde, delta, t0):
    if delta == 1:
        return 1 if t_tilde <= t0 else 0
    if t_tilde >= t0:
        return 0
    return None


@dataclass(frozen=True, eq=False)
class HarmonizedDataset:
    """Columnar store of pooled observational and phase 3 records.

    Arrays are read-only. ``s`` has NaN rows where ``eps_s == 0``;
    ``t_tilde``/``delta`` are NaN for phase 3 records (never used).
    ``allow_unknown_outcome`` lets records censored before ``t0`` be carried,
    but the estimators reject datasets that contain any.
    """

    ids: np.ndarray
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    eps_s: np.ndarray
    s: np.ndarray
    t_tilde: np.ndarray
    delta: np.ndarray
    t0: float = 90.0
    covariate_names: tuple = ()
    surrogate_names: tuple = ()
    y_reported: np.ndarray | None = None
    allow_unknown_outcome: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if s.ndim == 1:
            s = s[:, None]
        n = x.shape[0]
        cols = {
            "ids": np.asarray(self.ids),
            "z": np.asarray(self.z, dtype=np.int8),
            "a": np.asarray(self.a, dtype=np.int8),
            "eps_s": np.asarray(self.eps_s, dtype=np.int8),
            "t_tilde": np.asarray(self.t_tilde, dtype=float),
            "delta": np.asarray(self.delta, dtype=float),
        }
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise DataValidationError(f"{name} has shape {arr.shape}, expected ({n},)")
        if s.shape[0] != n:
            raise DataValidationError(f"s has {s.shape[0]} rows, expected {n}")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "s", _readonly(s))
        for name, arr in cols.items():
            object.__setattr__(self, name, _readonly(arr))
        if self.y_reported is not None:
            object.__setattr__(self, "y_reported", _readonly(np.asarray(self.y_reported, dtype=float)))
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x_{j + 1}" for j in range(x.shape[1])))
        if not self.surrogate_names:
            object.__setattr__(self, "surrogate_names", tuple(f"s_{j + 1}" for j in range(s.shape[1])))
        if len(self.covariate_names) != x.shape[1] or len(self.surrogate_names) != s.shape[1]:
            raise DataValidationError("column names do not match array widths")

    @classmethod
    def from_records(cls, records, t0=90.0, covariate_names=(), surrogate_names=(), **kwargs):
        records = list(records)
        if not records:
            raise DataValidationError("empty dataset")
        p = len(records[0].x)
        q = next((len(r.s) for r in records if r.s is not None), len(surrogate_names) or 1)
        bad = [r.id for r in records if len(r.x) != p or (r.s is not None and len(r.s) != q)]
        if bad:
            raise DataValidationError(
                "mixed covariate/surrogate dimensionality",
                [(rid, "mixed dimensionality") for rid in bad],
            )
        nan = float("nan")
        return cls(
            ids=[r.id for r in records],
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
            z=[r.z for r in records],
            a=[r.a for r in records],
            eps_s=[r.eps_s for r in records],
            s=np.array([r.s if r.s is not None else (nan,) * q for r in records], dtype=float),
            t_tilde=[nan if r.t_tilde is None else r.t_tilde for r in records],
            delta=[nan if r.delta is None else r.delta for r in records],
            y_reported=[nan if r.y is None else r.y for r in records],
            t0=t0,
            covariate_names=tuple(covariate_names),
            surrogate_names=tuple(surrogate_names),
            **kwargs,
        )

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def n_obs(self):
        return int(np.sum(self.z == 1))

    @property
    def n_rct(self):
        return int(np.sum(self.z == 0))

    @property
    def measured(self):
        return self.eps_s == 1

    @cached_property
    def y(self):
        """Derived outcome for z=1 records (NaN for phase 3 and censored-early records)."""
        y = np.full(self.n, np.nan)
        obs = self.z == 1
        t, d = self.t_tilde[obs], self.delta[obs]
        out = np.full(t.shape, np.nan)
        out[(d == 1) & (t <= self.t0)] = 1.0
        out[(d == 1) & (t > self.t0)] = 0.0
        out[(d == 0) & (t >= self.t0)] = 0.0
        y[obs] = out
        y.setflags(write=False)
        return y

    @property
    def records(self):
        return tuple(self.record(i) for i in range(self.n))

    def take(self, indices):
        """New dataset made of the given rows (repeats allowed), e.g. a bootstrap resample."""
        idx = np.asarray(indices, dtype=np.intp)
        return HarmonizedDataset(
            ids=self.ids[idx],
            x=self.x[idx],
            z=self.z[idx],
            a=self.a[idx],
            eps_s=self.eps_s[idx],
            s=self.s[idx],
            t_tilde=self.t_tilde[idx],
            delta=self.delta[idx],
            t0=self.t0,
            covariate_names=self.covariate_names,
            surrogate_names=self.surrogate_names,
            y_reported=None if self.y_reported is None else self.y_reported[idx],
            allow_unknown_outcome=self.allow_unknown_outcome,
        )

    def record(self, i):
        obs = self.z[i] == 1
        y = self.y[i]
        return ParticipantRecord(
            id=str(self.ids[i]),
            x=tuple(float(v) for v in self.x[i]),
            z=int(self.z[i]),
            a=int(self.a[i]),
            eps_s=int(self.eps_s[i]),
            s=tuple(float(v) for v in self.s[i]) if self.eps_s[i] == 1 else None,
            t_tilde=float(self.t_tilde[i]) if obs and np.isfinite(self.t_tilde[i]) else None,
            delta=int(self.delta[i]) if obs and np.isfinite(self.delta[i]) else None,
            y=int(y) if np.isfinite(y) else None,
        )


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def messages(self):
        return [msg for _, msg in self.violations]

    def raise_if_invalid(self):
        if self.violations:
            head = "; ".join(f"{rid}: {msg}" for rid, msg in self.violations[:10])
            more = len(self.violations) - 10
            tail = f" (+{more} more)" if more > 0 else ""
            raise DataValidationError(f"invalid dataset: {head}{tail}", self.violations)


def validate_dataset(d):
    """Check every structural invariant; returns a :class:`ValidationReport`."""
    if d.n == 0:
        raise DataValidationError("empty dataset")
    out = []

    def flag(mask, msg):
        out.extend((str(rid), msg) for rid in d.ids[mask])

    if d.n_obs < 1:
        out.append(("-", "no observational (z=1) records"))
    if d.n_rct < 1:
        out.append(("-", "no phase 3 (z=0) records"))
    flag(~np.isin(d.z, (0, 1)), "z not in {0,1}")
    flag(~np.isin(d.a, (0, 1)), "a not in {0,1}")
    flag(~np.isin(d.eps_s, (0, 1)), "eps_s not in {0,1}")
    flag((d.z == 1) & (d.a == 1), "observational record treated")
    s_present = np.all(np.isfinite(d.s), axis=1)
    s_partial = np.any(np.isfinite(d.s), axis=1) & ~s_present
    flag((d.eps_s == 1) & ~s_present, "surrogate missing")
    flag((d.eps_s == 0) & (s_present | s_partial), "surrogate present but eps_s=0")
    flag(~np.all(np.isfinite(d.x), axis=1), "covariates not finite")
    obs = d.z == 1
    no_follow = obs & ~(np.isfinite(d.t_tilde) & np.isfinite(d.delta))
    flag(no_follow, "t_tilde/delta missing")
    flag(obs & np.isfinite(d.delta) & ~np.isin(d.delta, (0, 1)), "delta not in {0,1}")
    flag(obs & np.isfinite(d.t_tilde) & (d.t_tilde < 0), "negative t_tilde")
    unknown = obs & ~no_follow & np.isnan(d.y)
    if not d.allow_unknown_outcome:
        flag(unknown, "outcome unknown at t0 (censored before horizon)")
    if d.y_reported is not None:
        rep = d.y_reported
        clash = obs & np.isfinite(rep) & np.isfinite(d.y) & (rep != d.y)
        flag(clash, "reported y inconsistent with t_tilde/delta")
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class SamplingDesign:
    """Case-control sampling of S in the observational study and per-arm SRS in phase 3."""

    control_ratio: float = 5.0
    n_sample_a0: int | None = None
    n_sample_a1: int | None = None

    def __post_init__(self):
        if not self.control_ratio >= 1:
            raise DataValidationError(f"control_ratio must be >= 1, got {self.control_ratio}")
        for v in (self.n_sample_a0, self.n_sample_a1):
            if v is not None and v < 0:
                raise DataValidationError("per-arm sample sizes must be non-negative")

    @classmethod
    def from_dataset(cls, d):
        """Read the realised design off a dataset (sampled controls per case, sampled per arm)."""
        obs = d.z == 1
        n_cases = int(np.sum(obs & (d.y == 1)))
        m_controls = int(np.sum(obs & (d.y == 0) & d.measured))
        ratio = m_controls / n_cases if n_cases else 1.0
        return cls(
            control_ratio=max(ratio, 1.0),
            n_sample_a0=int(np.sum((d.z == 0) & (d.a == 0) & d.measured)),
            n_sample_a1=int(np.sum((d.z == 0) & (d.a == 1) & d.measured)),
        )


def sampling_probabilities(d, design=None):
    """Design probability that S is measured, for every record (measured or not)."""
    design = design or SamplingDesign.from_dataset(d)
    pi = np.empty(d.n)
    obs = d.z == 1
    cases = obs & (d.y == 1)
    controls = obs & (d.y == 0)
    n_cases, n_controls = int(cases.sum()), int(controls.sum())
    if n_cases == 0:
        raise DataValidationError("no cases in the observational study")
    pi[cases] = 1.0
    if n_controls:
        pi[controls] = min(design.control_ratio * n_cases, n_controls) / n_controls
    pi[obs & np.isnan(d.y)] = np.nan
    for arm, n_sample in ((0, design.n_sample_a0), (1, design.n_sample_a1)):
        in_arm = (d.z == 0) & (d.a == arm)
        n_arm = int(in_arm.sum())
        if n_sample is None:
            n_sample = int(np.sum(in_arm & d.measured))
        if n_sample > n_arm:
            raise DataValidationError(
                f"arm {arm}: {n_sample} sampled exceeds {n_arm} enrolled"
            )
        if n_arm and n_sample == 0:
            raise DataValidationError(f"arm {arm}: no records sampled for S")
        pi[in_arm] = n_sample / n_arm if n_arm else np.nan
    return pi


def compute_design_weights(d, design=None):
    """Inverse sampling-probability weights; zero for records without S."""
    pi = sampling_probabilities(d, design)
    w = np.zeros(d.n)
    m = d.measured
    w[m] = 1.0 / pi[m]
    return w


CSV_REQUIRED = ("id", "z", "a", "eps_s", "t_tilde", "delta")


def _cell(v):
    return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else repr(float(v))


def write_csv(d, path):
    """Write one row per participant (blank cells for absent values)."""
    p, q = d.x.shape[1], d.s.shape[1]
    header = ["id", "z", "a", "eps_s"]
    header += [f"s_{j + 1}" for j in range(q)] + [f"x_{j + 1}" for j in range(p)]
    header += ["t_tilde", "delta"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            obs = d.z[i] == 1
            meas = d.eps_s[i] == 1
            row = [d.ids[i], int(d.z[i]), int(d.a[i]), int(d.eps_s[i])]
            row += [_cell(v) if meas else "" for v in d.s[i]]
            row += [_cell(v) for v in d.x[i]]
            row += [_cell(d.t_tilde[i]) if obs else "", str(int(d.delta[i])) if obs and np.isfinite(d.delta[i]) else ""]
            writer.writerow(row)


def read_csv(path, t0=90.0, allow_unknown_outcome=False):
    """Load a dataset written by :func:`write_csv` (or any file with the same columns)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: missing header row") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    missing = [c for c in CSV_REQUIRED if c not in header]
    if missing:
        raise DataValidationError(f"{path}: missing columns {missing}")
    s_cols = sorted((h for h in header if h.startswith("s_")), key=lambda h: int(h[2:]))
    x_cols = sorted((h for h in header if h.startswith("x_")), key=lambda h: int(h[2:]))
    if not s_cols or not x_cols:
        raise DataValidationError(f"{path}: need at least one s_j and one x_j column")
    if not rows:
        raise DataValidationError(f"{path}: empty dataset")
    idx = {h: k for k, h in enumerate(header)}

    def num(row, col, lineno):
        txt = row[idx[col]].strip()
        if txt == "":
            return np.nan
        try:
            return float(txt)
        except ValueError:
            raise DataValidationError(f"{path}:{lineno}: column {col} is not numeric: {txt!r}") from None

    n = len(rows)
    out = {k: np.empty(n) for k in ("z", "a", "eps_s", "t_tilde", "delta")}
    x = np.empty((n, len(x_cols)))
    s = np.empty((n, len(s_cols)))
    ids = []
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != len(header):
            raise DataValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[idx["id"]])
        for k in out:
            out[k][i] = num(row, k, lineno)
        x[i] = [num(row, c, lineno) for c in x_cols]
        s[i] = [num(row, c, lineno) for c in s_cols]
    for k in ("z", "a", "eps_s"):
        if np.any(np.isnan(out[k])):
            raise DataValidationError(f"{path}: column {k} has blank cells")
    z = out["z"]
    out["t_tilde"][z == 0] = np.nan
    out["delta"][z == 0] = np.nan
    return HarmonizedDataset(
        ids=ids,
        x=x,
        z=out["z"],
        a=out["a"],
        eps_s=out["eps_s"],
        s=s,
        t_tilde=out["t_tilde"],
        delta=out["delta"],
        t0=t0,
        covariate_names=tuple(x_cols),
        surrogate_names=tuple(s_cols),
        allow_unknown_outcome=allow_unknown_outcome,
    )
