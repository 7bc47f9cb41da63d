"""Command line: ``vcbroadcast run|sweep|compare|validate``.

Exit codes: 0 success, 1 config error, 2 some run left a tx undelivered.
"""
import argparse
import logging
import os
import sys

from . import harness, reports
from .config import ConfigError, load_config, raw_config

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _out_dir(cfg, args, name):
    return os.path.join(harness.out_root(cfg, args.out), name)


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _print_table(rows, cols, out):
    out.write("  ".join(f"{c:>14s}" for c in cols) + "\n")
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:14.3f}" if isinstance(v, float) else f"{str(v):>14s}")
        out.write("  ".join(cells) + "\n")


def _finish(cfg, args, res, out):
    cols = ["scheme", "median_ms", "p99_ms", "bytes_factor", "control_frac", "partial_runs"]
    if res.baseline is not None:
        cols += ["baseline_median_ms", "slowdown"]
    _print_table(res.summary, cols, out)
    if res.out_dir:
        out.write(f"reports written to {res.out_dir}\n")
    return EXIT_PARTIAL if res.partial_runs else EXIT_OK


def cmd_validate(args, out):
    cfg = load_config(args.config)
    n = len(cfg.runs())
    out.write(f"ok: {len(cfg.scheme_ids)} scheme(s) x {len(cfg.seeds)} seed(s) = {n} runs\n")
    if args.print_effective_config:
        out.write(cfg.to_yaml())
    return EXIT_OK


def cmd_run(args, out):
    cfg = load_config(args.config)
    if args.print_effective_config:
        out.write(cfg.to_yaml())
    res = harness.run_comparison(cfg, _out_dir(cfg, args, _stem(args.config)), args.workers)
    return _finish(cfg, args, res, out)


def cmd_compare(args, out):
    cfg = harness.load_preset(args.preset)
    if args.print_effective_config:
        out.write(cfg.to_yaml())
    res = harness.run_comparison(cfg, _out_dir(cfg, args, args.preset), args.workers)
    return _finish(cfg, args, res, out)


def cmd_sweep(args, out):
    with open(args.config) as fh:
        raw = raw_config(fh.read())
    values = harness.parse_values(args.values)
    if not values:
        raise ConfigError("--values", "no sweep values given")
    configs = harness.sweep_configs(raw, args.axis, values)
    base = configs[0][1]
    if args.print_effective_config:
        out.write(base.to_yaml())
    d = _out_dir(base, args, f"{_stem(args.config)}_sweep_{args.axis.replace('.', '_')}")
    harness.write_effective(base, d)
    rows = harness.run_sweep(raw, args.axis, values, os.path.join(d, "sweep.csv"), args.workers)
    for v, med in harness.sweep_medians(rows).items():
        out.write(f"{args.axis}={v}: mean per-seed median {med:.1f} ms\n")
    out.write(f"sweep written to {d}\n")
    partial = any(r["median_ms"] == float("inf") or r["p99_ms"] == float("inf") for r in rows)
    return EXIT_PARTIAL if partial else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="vcbroadcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--out", help=f"output root (default: ${harness.OUT_ENV} or output_dir)")
        sp.add_argument("--workers", type=int, default=1, help="parallel runs")
        sp.add_argument("--print-effective-config", action="store_true",
                        help="print the config with every default resolved")

    sp = sub.add_parser("run", help="run every (scheme, seed) of a config")
    sp.add_argument("config")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep one config parameter")
    sp.add_argument("config")
    sp.add_argument("--axis", required=True, help="dotted config path, e.g. controller.d_near")
    sp.add_argument("--values", required=True, help="comma-separated values")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="run a shipped preset")
    sp.add_argument("--preset", required=True, choices=harness.PRESETS)
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("validate", help="check a config and exit")
    sp.add_argument("config")
    sp.add_argument("--print-effective-config", action="store_true")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
