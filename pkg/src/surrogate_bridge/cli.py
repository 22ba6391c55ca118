"""Command-line entry point: ``surrogate-bridge {estimate,simulate,sensitivity}``.

Options can come from a JSON config file (``--config``); command-line flags
override it. Exit status is 0 on success, 2 for invalid input or
configuration, 3 when estimation fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy
import sklearn


__version__ = "0.1.0"
from .data import read_csv
from .estimators import BiasSpecification
from .exceptions import DataValidationError, EstimationError
from .pipeline import analyze
from .report import emit_report, write_rows_csv
from .sensitivity import bias_grid, sweep_grid
from .simulation import PRESETS, aggregate_metrics, get_preset, plot_data, run_replicates, true_parameters

log = logging.getLogger("surrogate_bridge")

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3
THREADS_ENV = "SURROGATE_BRIDGE_THREADS"

DEFAULTS = {
    "estimator": "plug-in",
    "variance": "sandwich",
    "b": 500,
    "level": 0.95,
    "threshold": 0.3,
    "seed": None,
    "out": "out",
    "u_uc": 0.0,
    "u_ct": 0.0,
}


class ConfigError(ValueError):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="surrogate-bridge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON file with option values")
        p.add_argument("--estimator", choices=("plug-in", "one-step"))
        p.add_argument("--variance", choices=("sandwich", "bootstrap", "both"))
        p.add_argument("--b", type=int, help="bootstrap replicates")
        p.add_argument("--level", type=float, help="confidence level")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--threshold", type=float, help="success threshold for the lower VE bound")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("estimate", help="estimate VE on a harmonized CSV dataset")
    common(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--u-uc", type=float, dest="u_uc")
    p.add_argument("--u-ct", type=float, dest="u_ct")
    p.add_argument("--t0", type=float)

    p = sub.add_parser("simulate", help="run a simulation scenario")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--reps", type=int, help="number of replicates")
    p.add_argument("--sampled", type=int, help="trial records sampled for S per arm (0 = all)")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("sensitivity", help="sweep a grid of constant bias functions")
    common(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--grid-u-uc", type=_float_list, dest="grid_u_uc")
    p.add_argument("--grid-u-ct", type=_float_list, dest="grid_u_ct")
    p.add_argument("--t0", type=float)
    return parser


def resolve_config(args):
    """Merge defaults, the config file and explicit flags (flags win)."""
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "verbose"):
            cfg[k] = v
    cfg["command"] = args.command
    if "threads" not in cfg or cfg["threads"] is None:
        cfg["threads"] = int(os.environ.get(THREADS_ENV, "1"))
    for k in ("input", "out", "config"):
        if isinstance(cfg.get(k), Path):
            cfg[k] = str(cfg[k])
    if cfg["estimator"] not in ("plug-in", "one-step"):
        raise ConfigError(f"unknown estimator {cfg['estimator']!r}")
    if cfg["variance"] not in ("sandwich", "bootstrap", "both"):
        raise ConfigError(f"unknown variance {cfg['variance']!r}")
    if not 0 < float(cfg["level"]) < 1:
        raise ConfigError("level must lie in (0, 1)")
    if int(cfg["b"]) < 2:
        raise ConfigError("--b must be at least 2")
    return cfg


def _estimator_name(cfg):
    return cfg["estimator"].replace("-", "_")


def _manifest(cfg, out, extra=None):
    man = {
        "config": cfg,
        "versions": {
            "surrogate_bridge": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
        "seed": cfg["seed"] if cfg["seed"] is not None else 0,
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, default=str) + "\n", encoding="utf-8")


def _outdir(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load(cfg):
    if not cfg.get("input"):
        raise ConfigError("--input is required")
    return read_csv(cfg["input"], t0=float(cfg.get("t0", 90.0)))


def cmd_estimate(cfg):
    d = _load(cfg)
    out = _outdir(cfg)
    bias = BiasSpecification(float(cfg["u_uc"]), float(cfg["u_ct"]))
    res = analyze(
        d, bias, estimator=_estimator_name(cfg), variance=cfg["variance"],
        level=float(cfg["level"]), n_bootstrap=int(cfg["b"]), seed=int(cfg["seed"] or 0),
    )
    rows = []
    e = res.effect
    for method, rep in res.variances.items():
        ints = res.intervals(method)
        rows.append({
            "estimator": e.method, "variance": method, "u_uc": bias.u_uc, "u_ct": bias.u_ct,
            "theta0": e.theta0, "theta1": e.theta1, "ve": e.ve, "log_one_minus_ve": e.log_one_minus_ve,
            "se_theta0": rep.se_theta0, "se_theta1": rep.se_theta1, "se_log_one_minus_ve": rep.se_log_one_minus_ve,
            "theta0_lower": ints["theta0"][0], "theta0_upper": ints["theta0"][1],
            "theta1_lower": ints["theta1"][0], "theta1_upper": ints["theta1"][1],
            "ve_lower": ints["ve"][0], "ve_upper": ints["ve"][1], "level": res.level,
        })
    write_rows_csv(rows, out / "effect_estimates.csv")
    _manifest(cfg, out, {"n_records": d.n})
    for r in rows:
        print(f"VE = {r['ve']:.4f}  ({r['variance']} {r['level']:.0%} CI {r['ve_lower']:.4f}, {r['ve_upper']:.4f})")
    return EXIT_OK


def cmd_simulate(cfg):
    if cfg.get("preset"):
        spec = get_preset(cfg["preset"])
    elif isinstance(cfg.get("scenario"), dict):
        raw = dict(cfg["scenario"])
        bias = raw.pop("analysis_bias", None)
        try:
            spec = replace(PRESETS["sim1-ve50-s500"], name="custom", **{
                k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()
            })
        except TypeError as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc
        if bias is not None:
            spec = replace(spec, analysis_bias=BiasSpecification(*bias))
    else:
        raise ConfigError("simulate needs --preset or a 'scenario' object in the config")
    if cfg.get("sampled") is not None:
        spec = replace(spec, rct_sampled_per_arm=int(cfg["sampled"]) or None)
    if cfg.get("reps") is not None:
        spec = replace(spec, replicates=int(cfg["reps"]))
    if cfg["seed"] is not None:
        spec = replace(spec, base_seed=int(cfg["seed"]))
    out = _outdir(cfg)
    rows = run_replicates(
        spec, _estimator_name(cfg), cfg["variance"], n_bootstrap=int(cfg["b"]),
        threshold=float(cfg["threshold"]), level=float(cfg["level"]), threads=int(cfg["threads"]),
    )
    truth = true_parameters(spec)
    metrics = [m.as_row() for m in aggregate_metrics(rows, truth)]
    write_rows_csv(rows, out / "raw_replicates.csv")
    emit_report(metrics, out / "metrics.csv", "csv")
    emit_report(metrics, out / "metrics.txt", "text-table")
    write_rows_csv(plot_data(rows), out / "plotdata.csv")
    spec_dict = asdict(spec)
    _manifest(cfg, out, {"scenario": spec_dict, "truth": list(truth)})
    print((out / "metrics.txt").read_text(encoding="utf-8"), end="")
    for r in rows:
        if r["error"]:
            log.warning("replicate %d (base_seed %d) failed: %s", r["replicate"], r["base_seed"], r["error"])
    return EXIT_OK


def cmd_sensitivity(cfg):
    d = _load(cfg)
    out = _outdir(cfg)
    grid_cfg = cfg.get("grid") or {}
    u_uc = cfg.get("grid_u_uc") or grid_cfg.get("u_uc") or [0.0]
    u_ct = cfg.get("grid_u_ct") or grid_cfg.get("u_ct") or [0.0]
    grid = bias_grid(u_uc, u_ct)
    sg, rep = sweep_grid(
        d, grid, level=float(cfg["level"]), threshold=float(cfg["threshold"]),
        estimator=_estimator_name(cfg), variance=cfg["variance"],
        n_bootstrap=int(cfg["b"]), seed=int(cfg["seed"] or 0),
    )
    rows = [{
        "u_uc": p.bias.u_uc, "u_ct": p.bias.u_ct, "theta0": p.effect.theta0, "theta1": p.effect.theta1,
        "ve": p.effect.ve, "se_log_one_minus_ve": p.se_log, "ve_lower": p.ve_lower, "ve_upper": p.ve_upper,
    } for p in sg.points]
    write_rows_csv(rows, out / "grid.csv")
    write_rows_csv([{
        "ignorance_lower": rep.ignorance_interval[0], "ignorance_upper": rep.ignorance_interval[1],
        "eui_lower": rep.eui[0], "eui_upper": rep.eui[1],
        "threshold": rep.threshold, "success": rep.success, "n_points": len(sg.points),
    }], out / "report.csv")
    _manifest(cfg, out, {"n_records": d.n})
    print(f"ignorance interval ({rep.ignorance_interval[0]:.4f}, {rep.ignorance_interval[1]:.4f}); "
          f"EUI ({rep.eui[0]:.4f}, {rep.eui[1]:.4f}); success={rep.success}")
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "sensitivity": cmd_sensitivity}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (DataValidationError, ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        violations = getattr(exc, "violations", None) or []
        for rid, msg in violations[:20]:
            print(f"  record {rid}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
