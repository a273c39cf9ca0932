"""Command-line front end: simulate, fit, eval, benchmark.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 solver error.
Set MAXRM_LOG (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import MaggingModel
from .cart import FORMAT_VERSION, Forest, TreeHyperparams
from .dataplane import (SETTINGS, DataError, GenerationError, default_config, generate,
                        load_csv_with_labels, write_csv)
from .evalharness import ConfigError, ExperimentConfig, MethodSpec, evaluate, fit_method, run_experiment
from .minimax import SolverConfig, SolverError
from .risk import KINDS, RiskSpec
from .strategies import MaxRmForest, StrategySpec
from .svgplot import plot_aggregate

log = logging.getLogger("maxrm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
MODEL_FORMAT = "maxrm-model"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# -- model documents -------------------------------------------------------------

def _num_or_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else float(v)


def model_to_dict(model, env_labels, p: int, method: MethodSpec, seed: int) -> dict:
    if isinstance(model, MaggingModel):
        body = {"kind": "magging", "forests": [f.forest.to_dict() for f in model.forests],
                "q": model.q.tolist(), "z": _num_or_none(model.z)}
        risk = model.risk
    else:
        body = {"kind": "forest", "forest": model.forest.to_dict(),
                "holdout_z": _num_or_none(model.holdout_z)}
        risk = model.risk
    return {"format": MODEL_FORMAT, "version": FORMAT_VERSION, "package_version": __version__,
            "method": method.to_dict(), "seed": seed, "p": p, "env_labels": list(env_labels),
            "risk": {"kind": risk.kind, "offsets": risk.offsets.tolist()}, **body}


def model_from_dict(d: dict):
    """Returns (model, method spec, seed, p)."""
    if d.get("format") != MODEL_FORMAT:
        raise DataError("not a model document (format field missing or wrong)")
    if d.get("version") != FORMAT_VERSION:
        raise DataError(f"model format version {d.get('version')} unsupported (expected {FORMAT_VERSION})")
    try:
        method = MethodSpec.from_dict(d["method"])
        risk = RiskSpec(d["risk"]["kind"], np.array(d["risk"]["offsets"], dtype=float))
        hp = TreeHyperparams(method.trees.max_depth, method.trees.min_leaf_size, method.trees.m_try,
                             int(d["seed"]))
        if d["kind"] == "magging":
            forests = [MaxRmForest(Forest.from_dict(f), StrategySpec("rf"), RiskSpec.mse(1),
                                   method.solver, hp) for f in d["forests"]]
            z = d["z"]
            model = MaggingModel(forests, np.array(d["q"], dtype=float), risk,
                                 float("nan") if z is None else z)
        else:
            strat = StrategySpec("rf") if method.strategy == "rf" else StrategySpec.parse(method.strategy)
            model = MaxRmForest(Forest.from_dict(d["forest"]), strat, risk, method.solver, hp,
                                holdout_z=d.get("holdout_z"))
        return model, method, int(d["seed"]), int(d["p"])
    except (KeyError, TypeError, ValueError, ConfigError) as err:
        if isinstance(err, DataError):
            raise
        raise DataError(f"malformed model document: {err}") from err


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.setting not in SETTINGS:
        raise ConfigError(f"unknown setting {args.setting!r}; expected one of {', '.join(SETTINGS)}")
    kw = {k: v for k, v in (("n_per_env", args.n_per_env), ("n_total", args.n_total), ("K", args.K),
                            ("p", args.p), ("noise_sd", args.noise_sd)) if v is not None}
    cfg = default_config(args.setting, seed=args.seed, **kw)
    train, test, _ = generate(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(train, out / "train.csv")
        write_csv(test, out / "test.csv")
    except OSError as err:
        raise DataError(f"cannot write to {out}: {err}") from err
    for name, ds in (("train", train), ("test", test)):
        sizes = ", ".join(f"env {e}: {n}" for e, n in enumerate(ds.n_e))
        print(f"{name}: {ds.n} rows, p = {ds.p}, K = {ds.K} ({sizes})")
    return EXIT_OK


def _method_from_args(args) -> MethodSpec:
    solver = {"method": args.solver}
    if args.solver == "bcd":
        solver["patience"] = 1
    for k in ("gamma", "t_max", "delta", "patience", "block_size"):
        v = getattr(args, k)
        if v is not None:
            solver[k] = v
    trees = {"min_leaf_size": args.min_leaf, "max_depth": args.max_depth, "m_try": args.m_try}
    return MethodSpec.from_dict({"name": args.strategy, "strategy": args.strategy, "risk": args.risk,
                                 "B": args.B, "bootstrap": not args.no_bootstrap,
                                 "solver": solver, "trees": trees})


def cmd_fit(args) -> int:
    method = _method_from_args(args)
    ds, labels = load_csv_with_labels(args.data)
    t0 = time.perf_counter()
    try:
        model = fit_method(method, ds, args.seed, args.workers)
    except DataError as err:
        raise DataError(_with_labels(str(err), labels)) from err
    dt = time.perf_counter() - t0
    doc = model_to_dict(model, labels, ds.p, method, args.seed)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    met = evaluate(model, ds, tuple(dict.fromkeys((method.risk, "mse"))), _hp(method, args.seed))
    report = {
        "strategy": method.strategy, "risk": method.risk, "n": ds.n, "p": ds.p,
        "env_labels": labels, "fit_seconds": dt,
        "in_sample": {
            "max_risk": met.max_risk[method.risk],
            "env_risks": met.env_risks[method.risk].tolist(),
            "pooled_mse": met.pooled_mse,
        },
    }
    if isinstance(model, MaxRmForest):
        report["holdout_z"] = _num_or_none(model.holdout_z)
        report["weights"] = model.forest.weights.tolist()
        report["trees"] = [_tree_report(d, labels) for d in model.diagnostics]
        report["infeasible_trees"] = sum(not d.get("feasible", True) for d in model.diagnostics)
    else:
        report["q"] = model.q.tolist()
        report["z"] = _num_or_none(model.z)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
        report_path.write_text(json.dumps(report, indent=1) + "\n")
    except OSError as err:
        raise DataError(f"cannot write model: {err}") from err
    print(f"fitted {method.strategy} ({method.risk}) on {ds.n} rows in {dt:.2f}s; "
          f"in-sample max {method.risk} = {met.max_risk[method.risk]:.6g}")
    print(f"model: {out}\nreport: {report_path}")
    return EXIT_OK


def _with_labels(msg, labels):
    # internal environment indices -> the labels used in the CSV
    def sub(m):
        e = int(m.group(1))
        return f"environment {labels[e]!r}" if e < len(labels) else m.group(0)
    return re.sub(r"environment (\d+)", sub, msg)


def _tree_report(d, labels):
    return {"z": d.get("claimed_z", d.get("z")), "active": [labels[e] for e in d.get("active", [])],
            "n_leaves": d.get("n_leaves"), "feasible": d.get("feasible", True)}


def _hp(method, seed):
    return TreeHyperparams(method.trees.max_depth, method.trees.min_leaf_size, method.trees.m_try, seed)


def cmd_eval(args) -> int:
    try:
        doc = json.loads(Path(args.model).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read model {args.model}: {err}") from err
    model, method, seed, p = model_from_dict(doc)
    ds, labels = load_csv_with_labels(args.data)
    if ds.p != p:
        raise DataError(f"model expects {p} covariates, data has {ds.p}")
    kinds = args.risk.split(",") if args.risk else list(dict.fromkeys((method.risk, "mse")))
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown risk kind {k!r}")
    met = evaluate(model, ds, tuple(kinds), _hp(method, seed))
    for w in met.warnings:
        log.warning(w)
    rows = []
    for k in kinds:
        rows.append((f"max_{k}", met.max_risk[k]))
        rows += [(f"{k}[{labels[e]}]", v) for e, v in enumerate(met.env_risks[k])]
    rows.append(("pooled_mse", met.pooled_mse))
    out = sys.stdout if args.out in (None, "-") else None
    try:
        fh = out or open(args.out, "w", newline="")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(float(v))])
        if out is None:
            fh.close()
            for k, v in rows:
                if k.startswith("max_") or k == "pooled_mse":
                    print(f"{k} = {v:.6g}")
    except OSError as err:
        raise DataError(f"cannot write metrics: {err}") from err
    return EXIT_OK


PRESETS = ("table1", "table2", "table3", "fig3", "fig4", "appB", "appD3", "appD4")


def load_config(ref: str) -> dict:
    """Config from a path, or a shipped preset given by name (with or without .json)."""
    path = Path(ref)
    try:
        if path.exists():
            return json.loads(path.read_text())
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        if name in PRESETS:
            return json.loads(resources.files("maxrm").joinpath("presets", name + ".json").read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{ref}: invalid JSON: {err}") from err
    raise ConfigError(f"config {ref!r} not found (presets: {', '.join(PRESETS)})")


def cmd_benchmark(args) -> int:
    raw = load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.reps is not None:
        raw["repetitions"] = args.reps
    cfg = ExperimentConfig.from_dict(raw)
    out = Path(args.out or cfg.outputs.get("dir", cfg.name))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(r, _):
        log.info("repetition %d/%d done", r + 1, cfg.repetitions)

    table = run_experiment(cfg, workers=args.workers, progress=progress)
    # wall-clock numbers live in the metadata sidecar so the CSVs stay reproducible
    timing = [row for row in table.rows if row[2] == "runtime"]
    table.rows = [row for row in table.rows if row[2] != "runtime"]
    per_rep = out / cfg.outputs.get("per_rep", "per_rep.csv")
    agg = out / cfg.outputs.get("aggregate", "aggregate.csv")
    table.write_csv(per_rep, agg)
    aggregate = table.aggregate()
    plots = []
    for metric in dict.fromkeys(k for _, k, _, _ in aggregate):
        svg = plot_aggregate(aggregate, metric, f"{cfg.name}: {metric}")
        if svg:
            p = out / f"{cfg.outputs.get('plot', 'plot')}_{metric}.svg"
            p.write_text(svg)
            plots.append(p.name)
    meta = {"name": cfg.name, "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)),
            "elapsed_seconds": time.time() - t0, "package_version": __version__,
            "config": raw, "failures": [list(f) for f in table.failures],
            "runtime": [list(r) for r in timing], "plots": plots}
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    for m, k, mu, ci in aggregate:
        ci_s = "" if ci is None else f" +/- {ci:.4g}"
        print(f"{m:32s} {k:24s} {mu:.4g}{ci_s}")
    for name, r, msg in table.failures:
        print(f"warning: {name} rep {r} failed: {msg}", file=sys.stderr)
    print(f"results in {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="maxrm", description="Random forests minimizing the maximum risk across environments.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    cores = os.cpu_count() or 1

    s = sub.add_parser("simulate", help="write train/test CSVs from a simulation setting")
    s.add_argument("--setting", required=True, help="|".join(SETTINGS))
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n-per-env", type=int)
    s.add_argument("--n-total", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--noise-sd", type=float)
    s.add_argument("--workers", type=int, default=cores, help="unused; accepted for uniformity")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model on a CSV and write model JSON plus a fit report")
    f.add_argument("--data", required=True)
    f.add_argument("--strategy", default="posthoc",
                   help="rf|magging|posthoc|local|global|global-nondfs|weights, optional -w suffix")
    f.add_argument("--risk", default="mse", choices=KINDS)
    f.add_argument("--B", type=int, default=100)
    f.add_argument("--min-leaf", type=int, default=5)
    f.add_argument("--max-depth", type=int)
    f.add_argument("--m-try", type=int)
    f.add_argument("--no-bootstrap", action="store_true")
    f.add_argument("--solver", default="eg", choices=("eg", "bcd"))
    f.add_argument("--gamma", type=float)
    f.add_argument("--t-max", type=int)
    f.add_argument("--delta", type=float)
    f.add_argument("--patience", type=int)
    f.add_argument("--block-size", type=int)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--workers", type=int, default=cores)
    f.add_argument("--out", required=True, help="model JSON path")
    f.add_argument("--report", help="fit report path (default: <out>.report.json)")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a model JSON on a CSV, writing a metrics CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--risk", help="comma-separated risk kinds (default: the model's kind and mse)")
    e.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    e.add_argument("--workers", type=int, default=cores, help="unused; accepted for uniformity")
    e.add_argument("--out", help="metrics CSV path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="run an experiment config or shipped preset")
    b.add_argument("config", help="path to a JSON config or a preset name: " + ", ".join(PRESETS))
    b.add_argument("--seed", type=int, help="override the master seed")
    b.add_argument("--reps", type=int, help="override the number of repetitions")
    b.add_argument("--workers", type=int, default=cores)
    b.add_argument("--out", help="output directory (default: the config name)")
    b.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("MAXRM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as ex:  # usage errors, --help, --version
        return ex.code if isinstance(ex.code, int) else EXIT_USAGE
    if getattr(args, "workers", 1) is not None and args.workers < 1:
        print("maxrm: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"maxrm: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError) as err:
        print(f"maxrm: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except SolverError as err:
        print(f"maxrm: solver error: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
