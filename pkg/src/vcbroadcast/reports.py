"""CSV emission: CDF plot data, sweep long-format rows, and summary tables.

All writers format floats with fixed precision and sort rows by a stable key
so re-emitting identical metrics yields byte-identical files.
"""
import csv
import io
import math
import os

import numpy as np

from .engine import percentile

PLOTDATA_VERSION = "vcbroadcast-plotdata/1"
SWEEP_VERSION = "vcbroadcast-sweep/1"
SUMMARY_VERSION = "vcbroadcast-summary/1"
RUNS_VERSION = "vcbroadcast-runs/1"

SWEEP_COLUMNS = ["axis", "value", "seed", "median_ms", "p90_ms", "p99_ms", "bytes_factor",
                 "control_frac"]


def _fmt(x):
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, (float, np.floating)):
        if math.isinf(x):
            return "inf"
        if math.isnan(x):
            return "nan"
        return f"{x:.3f}"
    return str(x)


def _csv_text(version, header, rows):
    buf = io.StringIO()
    buf.write(f"# {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def read_csv(path):
    """Rows of a file written here, as dicts (the version line is skipped)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cdf_points(samples):
    """Sorted ``(latency_ms, cumulative_fraction)`` pairs.

    Infinite samples (an honest node never got the tx) stay in the
    denominator, so the curve of a partial run tops out below 1.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        return []
    fin = np.sort(x[np.isfinite(x)])
    frac = np.arange(1, len(fin) + 1) / x.size
    return list(zip(fin.tolist(), frac.tolist()))


def pooled(metrics):
    return np.concatenate([np.asarray(m.coverage_ms, dtype=float) for m in metrics]) \
        if metrics else np.empty(0)


def group_by_scheme(results):
    out = {}
    for m in results:
        out.setdefault(m.scheme, []).append(m)
    for v in out.values():
        v.sort(key=lambda m: m.seed)
    return out


def emit_plotdata(results, out_dir):
    """One ``cdf_<scheme>.csv`` per scheme over pooled per-tx coverage times."""
    if not results:
        raise ValueError("no metrics to emit")
    paths = []
    for scheme, ms in sorted(group_by_scheme(results).items()):
        pts = cdf_points(pooled(ms))
        text = _csv_text(PLOTDATA_VERSION, ["latency_ms", "cumulative_fraction"],
                         [(a, f"{b:.6f}") for a, b in pts])
        paths.append(_write(os.path.join(out_dir, f"cdf_{scheme}.csv"), text))
    return paths


def _bytes_per_tx(ms):
    """Pooled bytes per tx over a run set."""
    tx = sum(m.n_tx for m in ms)
    return sum(m.dissemination_bytes + m.control_bytes_active for m in ms) / max(tx, 1)


def _control_frac(ms):
    return sum(m.control_bytes_active for m in ms) / max(sum(m.dissemination_bytes for m in ms), 1)


def _stats(samples):
    if len(samples) == 0:
        return math.nan, math.nan, math.nan
    return percentile(samples, 50), percentile(samples, 90), percentile(samples, 99)


def summarize(results, reference="random8", baseline=None):
    """Table-1 style rows, one per scheme, in first-seen scheme order.

    Medians pool per-tx coverage times across seeds.  ``bytes_factor`` is
    relative to the ``reference`` scheme when it is present.  With
    ``baseline`` (attack-free results of the same matrix) each row also gets
    the baseline median and the relative slowdown.
    """
    groups = group_by_scheme(results)
    order = list(dict.fromkeys(m.scheme for m in results))
    ref = groups.get(reference)
    ref_bpt = _bytes_per_tx(ref) if ref else None
    base = group_by_scheme(baseline) if baseline else {}
    rows = []
    for s in order:
        ms = groups[s]
        med, p90, p99 = _stats(pooled(ms))
        bpt = _bytes_per_tx(ms)
        row = {"scheme": s, "median_ms": med, "p90_ms": p90, "p99_ms": p99,
               "bytes_per_tx": bpt,
               "bytes_factor": bpt / ref_bpt if ref_bpt else math.nan,
               "control_frac": _control_frac(ms), "runs": len(ms),
               "partial_runs": sum(m.partial for m in ms),
               "undelivered_tx": sum(m.undelivered for m in ms)}
        row["partial"] = row["partial_runs"] > 0
        if baseline is not None:
            bmed = _stats(pooled(base.get(s, [])))[0]
            row["baseline_median_ms"] = bmed
            row["slowdown"] = med / bmed - 1.0 if bmed and not math.isnan(bmed) else math.nan
        rows.append(row)
    return rows


def emit_summary(rows, path):
    header = list(rows[0]) if rows else ["scheme"]
    return _write(path, _csv_text(SUMMARY_VERSION, header, [[r[k] for k in header] for r in rows]))


def run_rows(results):
    """Per-run rows sorted by (scheme order, seed)."""
    order = {s: i for i, s in enumerate(dict.fromkeys(m.scheme for m in results))}
    rows = []
    for m in sorted(results, key=lambda m: (order[m.scheme], m.seed)):
        med, p90, p99 = _stats(m.coverage_ms) if m.n_tx else (math.nan,) * 3
        rows.append({"scheme": m.scheme, "seed": m.seed, "n_tx": m.n_tx, "median_ms": med,
                     "p90_ms": p90, "p99_ms": p99, "bytes_per_tx": m.bytes_per_tx,
                     "control_frac": m.control_fraction, "mean_depth": m.mean_depth,
                     "undelivered": m.undelivered, "partial": m.partial})
    return rows


def emit_runs(results, out_dir):
    """Per-run CSV plus the matching JSON-lines metrics dump."""
    rows = run_rows(results)
    header = list(rows[0]) if rows else ["scheme", "seed"]
    csv_path = _write(os.path.join(out_dir, "runs.csv"),
                      _csv_text(RUNS_VERSION, header, [[r[k] for k in header] for r in rows]))
    order = {s: i for i, s in enumerate(dict.fromkeys(m.scheme for m in results))}
    lines = [m.to_json() for m in sorted(results, key=lambda m: (order[m.scheme], m.seed))]
    json_path = _write(os.path.join(out_dir, "metrics.jsonl"), "\n".join(lines) + "\n")
    return csv_path, json_path


def sweep_rows(axis, value, results, reference=None):
    """Long-format rows for one axis value, one per seed.

    ``bytes_factor`` is relative to the matched-seed ``reference`` run when
    given (dict seed -> RunMetrics), else the absolute overhead beta.
    """
    from .engine import bandwidth_factor
    rows = []
    for m in sorted(results, key=lambda m: m.seed):
        med, p90, p99 = _stats(m.coverage_ms)
        ref = reference.get(m.seed) if reference else None
        rows.append({"axis": axis, "value": value, "seed": m.seed, "median_ms": med,
                     "p90_ms": p90, "p99_ms": p99, "bytes_factor": bandwidth_factor(m, ref),
                     "control_frac": m.control_fraction})
    return rows


def emit_sweep(rows, path):
    return _write(path, _csv_text(SWEEP_VERSION, SWEEP_COLUMNS,
                                  [[r[k] for k in SWEEP_COLUMNS] for r in rows]))
