"""Command-line entry point.

``run`` executes a (policy, seed) matrix from a JSON scenario file and writes
``runs.csv``, ``speedup.csv`` and ``reports.json`` into the output directory.
``compare`` rebuilds the speedup table from an existing ``runs.csv``.

Exit codes: 0 on success, 2 for invalid configuration or arguments, 3 when a
run fails to finish (liveness).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import FanInError
from .experiment import (
    ConfigError,
    comparison_table,
    load_config,
    parse_seeds,
    read_runs_csv,
    run_matrix,
    write_table_csv,
)
from .netsim import LivenessError

EXIT_INVALID = 2
EXIT_LIVENESS = 3

log = logging.getLogger("inasim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inasim", description="In-network aggregation simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log each finished run")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a policy/seed matrix from a config file")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--policy", action="append",
                   help="esa, atp, switchml, always or coinflip:P; repeatable or comma-separated")
    r.add_argument("--seeds", help="e.g. 1..5 or 1,3,7 (default: the config's seeds)")
    r.add_argument("--trace", action="store_true", help="also write per-run event traces")
    r.add_argument("--out", type=Path, help="output directory (default: config out_dir or .)")

    c = sub.add_parser("compare", help="rebuild the speedup table from runs.csv")
    c.add_argument("--out", required=True, type=Path, help="directory holding runs.csv")
    c.add_argument("--baseline", default="esa")
    return p


def _policies(args, cfg) -> list[str]:
    if not args.policy:
        return [cfg.policy]
    out = []
    for item in args.policy:
        out.extend(s.strip() for s in item.split(",") if s.strip())
    return out


def _print_table(table) -> None:
    if not table:
        print("no runs")
        return
    cols = list(table[0])
    print("  ".join(f"{c:>16}" for c in cols))
    for row in table:
        print("  ".join(f"{row[c]!s:>16}" for c in cols))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
    if not seeds:
        raise ConfigError("seeds: empty selection")
    policies = _policies(args, cfg)
    for pol in policies:
        cfg.with_policy(pol)
    out = args.out or Path(cfg.out_dir or ".")

    def progress(rep):
        log.info("%s seed %d: mean JCT %.0f ns, utilization %.3f (%.1f s)", rep.policy,
                 rep.seed, rep.mean_jct_ns, rep.utilization, rep.wall_s)

    _, table = run_matrix(cfg, policies, seeds, out, args.trace, progress)
    _print_table(table)
    print(f"wrote {out / 'runs.csv'}")
    return 0


def cmd_compare(args) -> int:
    path = args.out / "runs.csv"
    rows = read_runs_csv(path)
    table = comparison_table(rows, args.baseline)
    write_table_csv(table, args.out / "speedup.csv")
    _print_table(table)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except (ConfigError, FanInError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except LivenessError as e:
        print(f"liveness failure: {e}", file=sys.stderr)
        return EXIT_LIVENESS
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
