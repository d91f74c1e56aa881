"""``mfbnet`` command line: gradcheck, equivalence, train, bench.

Exit codes: 0 success, 1 a check failed, 2 bad configuration or input,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import bench, checks, experiments
from .config import RunConfig, load
from .errors import ConfigurationError, MfbError, TrainingError

def cmd_gradcheck(cfg: RunConfig, out: str) -> int:
    results = checks.run_gradcheck_suite(cfg.seed, cfg.step, cfg.tol, cfg.kink_margin, cfg.relu_margin,
                                          cfg.fd_agreement)
    with open(os.path.join(out, "gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["op", "max_rel_err", "pass"])
        for r in results:
            w.writerow([r.name, repr(r.report.max_rel_err), "true" if r.passed else "false"])
    failed = [r for r in results if not r.passed]
    for r in failed:
        name = r.report.worst_param()
        print(f"FAIL {r.name}: max relative error {r.report.max_rel_err:.3e} at {name}[{r.report.worst[name]}] "
              f"(point seed {r.seed})", file=sys.stderr)
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} ops pass at tol {cfg.tol:g}")
    return 1 if failed else 0


def cmd_equivalence(cfg: RunConfig, out: str) -> int:
    if cfg.instances < 1:
        raise ConfigurationError("equivalence suite needs instances >= 1")
    failures = checks.run_equivalence(cfg.instances, cfg.seed, cfg.fault, cfg.max_dim, cfg.max_k, cfg.max_o)
    with open(os.path.join(out, "equivalence.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "seed", "max_abs_err"])
        for f in failures:
            w.writerow([f.suite, f.seed, repr(f.error)])
    for f in failures:
        print(f"FAIL {f.suite}: instance seed {f.seed} (max abs err {f.error:.3e})", file=sys.stderr)
    print(f"equivalence: {cfg.instances} instances x 2 suites, {len(failures)} failures")
    return 1 if failures else 0


def cmd_train(cfg: RunConfig, out: str) -> int:
    result = experiments.run(cfg)
    experiments.write_run(out, result)
    spread = result.spread
    print(f"train [{result.label}]: accuracy {result.final_accuracy:.4f}, "
          f"final loss {result.history.losses[-1][1]:.5f}, pre-norm spread {spread.mean_spread:.4f}")
    return 0


def cmd_bench(cfg: RunConfig, out: str) -> int:
    grid = bench.parse_grid(cfg.bench_grid)
    if cfg.bench_timing:
        results = [bench.throughput(c, cfg.bench_batch, cfg.bench_repetitions, cfg.bench_warmup, cfg.seed)
                   for c in grid]
    else:
        results = bench.param_report(grid)
    bench.write_csv(results, os.path.join(out, "bench.csv"))
    for r in results:
        print(f"{r.operator} m={r.m} n={r.n} k={r.k} o={r.o} d={r.d}: params {r.projection_param_count}, "
              f"intermediate {r.intermediate_dim}")
    return 0


COMMANDS = {"gradcheck": cmd_gradcheck, "equivalence": cmd_equivalence, "train": cmd_train, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfbnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gradcheck": "finite-difference check of every operator and both networks",
             "equivalence": "factorization and MLB-specialization suites",
             "train": "train on the synthetic task and export CSVs and the model file",
             "bench": "parameter counts, intermediate sizes and timing of the fusion operators"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key = value settings file (defaults for missing keys)")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load(args.config) if args.config else RunConfig()
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except TrainingError as exc:
        print(f"error: {exc} (iteration {exc.iteration})", file=sys.stderr)
        return exc.exit_code
    except MfbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
