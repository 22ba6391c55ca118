"""CSV and text-table output for estimates, sweeps and simulation metrics."""

from __future__ import annotations

import csv
import math
from pathlib import Path

FORMATS = ("csv", "text-table")

TABLE_PARAMS = (("theta0", "theta0"), ("theta1", "theta1"), ("ve", "VE"))
TABLE_STATS = (("bias", "Bias"), ("se_bs", "SE(bs)"), ("se_sw", "SE(sw)"), ("sd", "SD"), ("coverage", "Cov"))


def _fmt_csv(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _parse(txt):
    if txt == "":
        return float("nan")
    try:
        return int(txt)
    except ValueError:
        pass
    try:
        return float(txt)
    except ValueError:
        return txt


def write_rows_csv(rows, path, columns=None):
    """Write dict rows; floats use ``repr`` so reading them back is exact."""
    rows = list(rows)
    if not rows:
        raise ValueError(f"refusing to write empty results to {path}")
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt_csv(r.get(c, "")) for c in columns])
    return Path(path)


def read_rows_csv(path):
    """Inverse of :func:`write_rows_csv` (numbers parsed, blanks become NaN)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse(v) for k, v in row.items()} for row in reader]


def sig3(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.3g}"


def text_table(metric_rows):
    """Grouped blocks, one per scenario and bias, with one line per parameter and an SP column."""
    metric_rows = list(metric_rows)
    if not metric_rows:
        raise ValueError("no results to tabulate")
    head = ["Parameter"] + [h for _, h in TABLE_STATS] + ["SP"]
    widths = [10] + [10] * len(TABLE_STATS) + [6]
    line = "  ".join(h.rjust(w) for h, w in zip(head, widths))
    out = []
    for r in metric_rows:
        out.append(f"# {r['scenario']}  u_uc={r['u_uc']:g}  u_ct={r['u_ct']:g}  n={r['n_replicates']}")
        out.append(line)
        for key, label in TABLE_PARAMS:
            cells = [label] + [sig3(r[f"{key}_{s}"]) for s, _ in TABLE_STATS]
            cells.append(sig3(r["sp"]) if key == "ve" else "")
            out.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
        out.append("")
    return "\n".join(out)


def parse_text_table(text):
    """Read a table written by :func:`text_table` back into metric dicts (3 significant digits)."""
    rows = []
    cur = None
    for raw in text.splitlines():
        if raw.startswith("# "):
            parts = raw[2:].split()
            cur = {"scenario": parts[0]}
            for p in parts[1:]:
                k, v = p.split("=")
                cur[k] = _parse(v)
            cur["n_replicates"] = cur.pop("n")
            rows.append(cur)
        elif cur is not None and raw.strip() and not raw.strip().startswith("Parameter"):
            cells = raw.split()
            key = {label: k for k, label in TABLE_PARAMS}[cells[0]]
            vals = [float("nan") if c == "-" else float(c) for c in cells[1:]]
            for (s, _), v in zip(TABLE_STATS, vals):
                cur[f"{key}_{s}"] = v
            if key == "ve":
                cur["sp"] = vals[len(TABLE_STATS)]
    return rows


def emit_report(results, path, format="csv"):
    """Write metric rows as CSV or as a text table; empty results are an error."""
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    results = list(results)
    if not results:
        raise ValueError("no results to report")
    if format == "csv":
        return write_rows_csv(results, path)
    Path(path).write_text(text_table(results) + "\n", encoding="utf-8")
    return Path(path)
