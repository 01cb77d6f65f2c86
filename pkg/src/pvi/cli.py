"""Command-line entry point: ``pvi run | split | compare | emit-plots | verify``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure
(or, for ``verify``, any failed criterion).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import acceptance, harness
from .config import METHODS, ConfigError, load_config
from .data import InfeasibleSplit, MissingTarget, ParseError, load_csv, make_split
from .expfam import DegenerateVariance, NotNormalizable
from .localopt import NonFiniteObjective
from .models import DimensionMismatch, NotDiagonal
from .oracle import NonFiniteEvaluation

log = logging.getLogger("pvi")

NUMERICAL = (NotNormalizable, DegenerateVariance, NonFiniteObjective, NonFiniteEvaluation, FloatingPointError)
INPUT = (ConfigError, InfeasibleSplit, ParseError, MissingTarget, FileNotFoundError, harness.SchemaMismatch, NotDiagonal,
         DimensionMismatch)


def _with_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "method", None):
        cfg = replace(cfg, method=replace(cfg.method, name=args.method))
    if getattr(args, "threads", None):
        cfg = replace(cfg, schedule=replace(cfg.schedule, threads=args.threads))
    return cfg.validate()


def _config_path(args) -> str:
    path = args.config_file or args.config
    if not path:
        raise ConfigError("no config given (positional argument or --config)")
    return path


def cmd_run(args) -> int:
    cfg = _with_overrides(load_config(_config_path(args)), args)
    result = harness.run_experiment(cfg)
    final = result.trace.records[-1]
    print(json.dumps({k: final.get(k) for k in ("comms", "test_nll", "test_err", "free_energy")}, sort_keys=True))
    return 0


def cmd_split(args) -> int:
    spec_cfg = load_config(args.spec)
    if Path(args.data).suffix.lower() == ".toml":
        data, _ = harness.build_data(load_config(args.data))
    else:
        data = load_csv(args.data, args.target)
    spec = spec_cfg.split if args.seed is None else replace(spec_cfg.split, seed=args.seed)
    part = make_split(data, spec)
    summary = {"M": part.M, "sizes": part.sizes, "spec": part.spec}
    if data.targets.dtype.kind in "iu":
        summary["label_counts"] = [np.bincount(c.targets, minlength=int(data.targets.max()) + 1).tolist()
                                   for c in part.per_client]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition.json").write_text(part.to_json() + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    jobs = []
    base_out = Path(args.out or "compare_out")
    for path in args.configs:
        cfg = load_config(path)
        methods = args.methods or [cfg.method.name]
        seeds = args.seeds or [cfg.seed if args.seed is None else args.seed]
        for method in methods:
            for seed in seeds:
                run_cfg = replace(cfg, seed=seed, method=replace(cfg.method, name=method),
                                  out=str(base_out / Path(path).stem / method / str(seed))).validate()
                jobs.append((Path(path).stem, method, seed, run_cfg))
    workers = max(args.threads or 1, 1)
    with ThreadPoolExecutor(workers) as pool:
        results = list(pool.map(lambda j: harness.run_experiment(j[3]), jobs))
    finals: dict[tuple[str, str], list[float]] = {}
    for (stem, method, _, _), res in zip(jobs, results):
        finals.setdefault((stem, method), []).append(res.trace.records[-1]["test_nll"])
    for (stem, method), vals in sorted(finals.items()):
        print(f"{stem:20s} {method:14s} test_nll {np.mean(vals):.4f} +- {np.std(vals):.4f} (n={len(vals)})")
    return 0


def cmd_emit_plots(args) -> int:
    traces = {}
    for i, path in enumerate(args.traces):
        path = Path(path)
        manifest = path.parent / "manifest.json"
        if manifest.is_file():
            meta = json.loads(manifest.read_text())
            key = (meta["config"]["method"]["name"], int(meta["seed"]))
        else:
            key = (path.stem, i)
        if key in traces:
            key = (f"{key[0]}:{path.parent.name}", key[1])
        traces[key] = harness.load_trace(path)
    tidy, summary = harness.emit_plot_data(traces, args.x, args.y, args.out or "plots", args.log_scale)
    print(f"wrote {tidy} and {summary}")
    return 0


def cmd_verify(args) -> int:
    try:
        numbers = sorted({int(n) for n in args.criteria.split(",")}) if args.criteria else None
    except ValueError:
        raise ConfigError(f"--criteria expects comma-separated integers, got {args.criteria!r}") from None
    if numbers and not set(numbers) <= set(acceptance.CRITERIA):
        raise ConfigError(f"unknown criterion in {args.criteria!r}")
    traces = {}
    results = []
    for n in numbers or sorted(acceptance.CRITERIA):
        res = acceptance.run_criterion(n, traces)
        print(res.line(), flush=True)
        results.append(res)
    acceptance.write_traces(traces, args.out or "verify_traces")
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" +
          (f"; failed: {', '.join(map(str, failed))}" if failed else ""))
    return 2 if failed else 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are input errors (exit 1); argparse's own default of 2 is reserved for numerical failures
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=int)
        if method:
            p.add_argument("--method", choices=METHODS)

    p = sub.add_parser("run", help="run one experiment from a TOML config")
    p.add_argument("config_file", nargs="?")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("split", help="partition a dataset and report client sizes and labels")
    p.add_argument("data", help="a CSV file or a run config whose [data] table is used")
    p.add_argument("spec", help="a TOML file with a [split] table")
    p.add_argument("--target", default="target", help="target column for CSV input")
    common(p, method=False)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("compare", help="run several configs, methods and seeds")
    p.add_argument("configs", nargs="+")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--seeds", nargs="+", type=int)
    common(p, method=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("emit-plots", help="write plot-ready CSVs from trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--x", default="comms", choices=harness.X_AXES)
    p.add_argument("--y", default="test_nll", choices=harness.Y_AXES)
    p.add_argument("--log-scale", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_plots)

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--criteria", help="comma-separated subset, e.g. 1,13,14")
    p.add_argument("--out", help="directory for the trace files (default ./verify_traces)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
