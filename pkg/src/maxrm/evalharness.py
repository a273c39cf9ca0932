"""Metrics, repeated experiments with confidence intervals, and property probes."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import stats as sps

from .baselines import MaggingModel, fit_magging, fit_rf
from .cart import TreeHyperparams, restat
from .dataplane import (TAG_REP, DgpConfig, EnvDataset, OracleFn, generate, rng_for,
                        sample_covariates)
from .minimax import PRECISE, SolverConfig, solve_posthoc
from .risk import KINDS, RiskSpec, make_risk, prediction_risks, risk_offsets
from .strategies import MaxRmForest, StrategySpec, fit_maxrm_forest, indeterminate_leaves

log = logging.getLogger("maxrm")


class ConfigError(ValueError):
    """Malformed experiment description."""


# -- metrics --------------------------------------------------------------------

@dataclass
class Metrics:
    env_risks: dict            # kind -> per-environment risks
    max_risk: dict             # kind -> max over nonempty environments
    pooled_mse: float
    mise: float | None = None
    warnings: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {f"max_{k}": v for k, v in self.max_risk.items()}
        d["pooled_mse"] = self.pooled_mse
        for k, r in self.env_risks.items():
            for e, v in enumerate(r):
                d[f"env{e}_{k}"] = float(v)
        if self.mise is not None:
            d["mise"] = self.mise
        return d


def evaluate(model, test: EnvDataset, kinds=("mse",), hp: TreeHyperparams | None = None,
             pred=None) -> Metrics:
    """Risks of a fitted model on test data; offsets are recomputed on the test sample."""
    if pred is None:
        X = test.X
        pred = model.predict(X)
    pred = np.asarray(pred, dtype=float)
    if pred.shape != (test.n,):
        raise ValueError("prediction and test data sizes differ")
    warn = []
    n_e = test.n_e
    present = n_e > 0
    if not present.all():
        warn.append(f"empty test environment(s) {np.flatnonzero(~present).tolist()} excluded")
    env_risks, max_risk = {}, {}
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown risk kind {kind!r}")
        off = np.zeros(test.K)
        if kind != "mse":
            sub_ok = present
            sub = test.subset(np.flatnonzero(sub_ok[test.env]))
            off = risk_offsets(_relabel_all(sub, test.K), kind, hp or TreeHyperparams())
        rv = prediction_risks(pred, test.y, test.env, test.K, off)
        env_risks[kind] = rv.risks
        max_risk[kind] = rv.z
    pooled = float(np.mean((test.y - pred) ** 2))
    return Metrics(env_risks, max_risk, pooled, None, warn)


def _relabel_all(ds, K):
    # risk_offsets needs rows for every environment; fill absent ones with a stub
    # row whose offset is never used (the environment is excluded from the max)
    missing = np.setdiff1d(np.arange(K), np.unique(ds.env))
    if len(missing) == 0:
        return ds
    X = np.vstack([ds.X] + [ds.X[:1]] * (2 * len(missing)))
    y = np.concatenate([ds.y] + [np.zeros(2)] * len(missing))
    env = np.concatenate([ds.env] + [np.full(2, e) for e in missing])
    return EnvDataset(X, y, env, K)


def mise(model, oracle: OracleFn, X_eval) -> float:
    X_eval = np.asarray(X_eval, dtype=float)
    if len(X_eval) == 0:
        raise ValueError("X_eval is empty")
    d = model.predict(X_eval) - oracle(X_eval)
    return float(np.mean(d * d))


# -- result tables ----------------------------------------------------------------

def ci_half_width(values) -> float | None:
    v = np.asarray(values, dtype=float)
    R = len(v)
    if R < 2:
        return None
    return float(sps.t.ppf(0.975, R - 1) * v.std(ddof=1) / math.sqrt(R))


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)        # (method, rep, metric, value)
    failures: list = field(default_factory=list)    # (method, rep, message)
    extras: dict = field(default_factory=dict)

    def add(self, method, rep, metric, value):
        self.rows.append((str(method), int(rep), str(metric), float(value)))

    def methods(self) -> list:
        seen = []
        for m, *_ in self.rows:
            if m not in seen:
                seen.append(m)
        return seen

    def metrics(self, method=None) -> list:
        seen = []
        for m, _, k, _ in self.rows:
            if (method is None or m == method) and k not in seen:
                seen.append(k)
        return seen

    def values(self, method, metric) -> np.ndarray:
        vals = sorted((r, v) for m, r, k, v in self.rows if m == method and k == metric)
        return np.array([v for _, v in vals])

    def aggregate(self) -> list:
        out = []
        for m in self.methods():
            for k in self.metrics(m):
                v = self.values(m, k)
                out.append((m, k, float(v.mean()), ci_half_width(v)))
        return out

    def mean(self, method, metric) -> float:
        return float(self.values(method, metric).mean())

    def write_csv(self, per_rep_path=None, aggregate_path=None):
        if per_rep_path:
            with open(per_rep_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["method", "rep", "metric", "value"])
                for m, r, k, v in self.rows:
                    w.writerow([m, r, k, repr(v)])
        if aggregate_path:
            with open(aggregate_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["method", "metric", "mean", "ci_half"])
                for m, k, mean, ci in self.aggregate():
                    w.writerow([m, k, repr(mean), "" if ci is None else repr(ci)])

    @classmethod
    def read_csv(cls, per_rep_path) -> "ResultTable":
        t = cls()
        with open(per_rep_path, newline="") as fh:
            for row in csv.DictReader(fh):
                t.add(row["method"], int(row["rep"]), row["metric"], float(row["value"]))
        return t


# -- experiment configuration ----------------------------------------------------

def _from_dict(cls, d: dict, where: str, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass
class MethodSpec:
    name: str
    strategy: str = "posthoc"       # rf | magging | posthoc | local | global | global-nondfs | weights, '-w' suffix
    risk: str = "mse"
    solver: SolverConfig = field(default_factory=SolverConfig)
    trees: TreeHyperparams = field(default_factory=TreeHyperparams)
    B: int = 100
    bootstrap: bool = True

    @classmethod
    def from_dict(cls, d: dict, where="method") -> "MethodSpec":
        d = dict(d)
        if "name" not in d:
            raise ConfigError(f"{where}: missing 'name'")
        solver = d.pop("solver", {})
        trees = d.pop("trees", {})
        if "method" in solver and solver["method"] == "bcd":
            solver = {"patience": 1, **solver}
        if d.get("strategy") == "magging":
            # the K-dimensional weight problem is solved to high accuracy
            solver = {f.name: getattr(PRECISE, f.name) for f in fields(SolverConfig)
                      if f.name in ("gamma", "t_max", "delta", "patience")} | solver
        m = _from_dict(cls, d, where, skip=("solver", "trees"))
        m.solver = _from_dict(SolverConfig, solver, f"{where}.solver")
        m.trees = _from_dict(TreeHyperparams, trees, f"{where}.trees", skip=("seed",))
        if m.risk not in KINDS:
            raise ConfigError(f"{where}: unknown risk {m.risk!r}")
        if m.strategy != "magging":
            try:
                StrategySpec.parse(m.strategy)
            except ValueError as err:
                raise ConfigError(f"{where}: {err}") from None
        if m.B < 1:
            raise ConfigError(f"{where}: B must be >= 1")
        return m

    def to_dict(self) -> dict:
        sv = {f.name: getattr(self.solver, f.name) for f in fields(SolverConfig)}
        tr = {f.name: getattr(self.trees, f.name) for f in fields(TreeHyperparams) if f.name != "seed"}
        return {"name": self.name, "strategy": self.strategy, "risk": self.risk, "solver": sv,
                "trees": tr, "B": self.B, "bootstrap": self.bootstrap}


EXPERIMENT_KINDS = ("compare", "bias_variance", "indeterminacy")
METRIC_NAMES = ("max_mse", "max_nrw", "max_reg", "pooled_mse", "env_mse", "mise", "runtime",
                "infeasible_trees", "indeterminate_fraction")


@dataclass
class ExperimentConfig:
    name: str
    dgp: dict
    methods: list
    repetitions: int = 20
    seed: int = 0
    kind: str = "compare"
    metrics: list = field(default_factory=lambda: ["max_mse", "pooled_mse"])
    outputs: dict = field(default_factory=dict)
    sweep: dict | None = None
    eval_points: int = 10000
    workers: int = 1
    notes: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        methods = d.pop("methods", None)
        if not methods:
            raise ConfigError("config: 'methods' must be a non-empty list")
        cfg = _from_dict(cls, {**d, "methods": []}, "config")
        cfg.methods = [MethodSpec.from_dict(m, f"methods[{i}]") for i, m in enumerate(methods)]
        names = [m.name for m in cfg.methods]
        if len(set(names)) != len(names):
            raise ConfigError("config: method names must be unique")
        if cfg.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"config: unknown kind {cfg.kind!r}")
        if cfg.repetitions < 1:
            raise ConfigError("config: repetitions must be >= 1")
        for k in cfg.metrics:
            if k not in METRIC_NAMES:
                raise ConfigError(f"config: unknown metric {k!r}")
        unknown = set(cfg.outputs) - {"per_rep", "aggregate", "plot"}
        if unknown:
            raise ConfigError(f"config.outputs: unknown key(s) {sorted(unknown)}")
        cfg.dgp_config(0)   # validates the dgp block
        if cfg.sweep is not None:
            if set(cfg.sweep) != {"param", "values"} or not cfg.sweep["values"]:
                raise ConfigError("config.sweep needs 'param' and a non-empty 'values' list")
            head = cfg.sweep["param"].split(".")[0]
            if head not in ("dgp", "trees", "solver"):
                raise ConfigError("config.sweep.param must start with dgp., trees. or solver.")
        return cfg

    def dgp_config(self, seed: int, **override) -> DgpConfig:
        d = {**self.dgp, **override}
        d.setdefault("env_param_seed", self.seed)
        if "seed" in d:
            raise ConfigError("config.dgp: the seed is derived from the master seed")
        return _from_dict(DgpConfig, {**d, "seed": seed}, "config.dgp")


def rep_seed(master: int, r: int) -> int:
    return int(rng_for(master, TAG_REP, r).integers(0, 2**63 - 1))


# -- fitting and running -----------------------------------------------------------

def fit_method(m: MethodSpec, train: EnvDataset, seed: int, workers: int = 1):
    hp = TreeHyperparams(m.trees.max_depth, m.trees.min_leaf_size, m.trees.m_try, seed)
    spec = make_risk(train, m.risk, hp)
    if m.strategy == "magging":
        return fit_magging(train, spec, hp, m.B, seed, m.solver, workers)
    if m.strategy == "rf":
        return fit_maxrm_forest(train, StrategySpec("rf"), spec, m.solver, hp, m.B, seed, workers,
                                m.bootstrap)
    return fit_maxrm_forest(train, StrategySpec.parse(m.strategy), spec, m.solver, hp, m.B, seed,
                            workers, m.bootstrap)


def _apply_sweep(cfg: ExperimentConfig, value):
    head, key = cfg.sweep["param"].split(".", 1)
    if head == "dgp":
        return {**cfg.dgp, key: value}, None
    return cfg.dgp, (head, key, value)


def _override_method(m: MethodSpec, change):
    if change is None:
        return m
    head, key, value = change
    d = m.to_dict()
    d[head][key] = value
    return MethodSpec.from_dict(d)


def _run_rep(args):
    cfg, r = args
    table = ResultTable()
    seed = rep_seed(cfg.seed, r)
    points = cfg.sweep["values"] if cfg.sweep else [None]
    for value in points:
        dgp, change = (cfg.dgp, None) if value is None else _apply_sweep(cfg, value)
        dcfg = cfg.dgp_config(seed, **{k: v for k, v in dgp.items() if k not in cfg.dgp or cfg.dgp[k] != v})
        suffix = "" if value is None else f"[{cfg.sweep['param'].split('.', 1)[1]}={value}]"
        try:
            train, test, oracle = generate(dcfg)
        except Exception as err:  # data failures are recorded, other cells continue
            for m in cfg.methods:
                table.failures.append((m.name + suffix, r, f"data: {err}"))
            continue
        X_eval = None
        if "mise" in cfg.metrics and oracle is not None:
            X_eval = sample_covariates(dcfg, cfg.eval_points, seed)
        for m0 in cfg.methods:
            m = _override_method(m0, change)
            name = m.name + suffix
            try:
                t0 = time.perf_counter()
                model = fit_method(m, train, seed)
                dt = time.perf_counter() - t0
                _record(table, cfg, name, r, m, model, test, oracle, X_eval, dt)
            except Exception as err:
                log.warning("method %s rep %d failed: %s", name, r, err)
                table.failures.append((name, r, f"{type(err).__name__}: {err}"))
    return table


def _record(table, cfg, name, r, m, model, test, oracle, X_eval, dt):
    kinds = [k[4:] for k in cfg.metrics if k.startswith("max_")]
    if "env_mse" in cfg.metrics and "mse" not in kinds:
        kinds.append("mse")
    if not kinds:
        kinds = ["mse"]
    hp = m.trees
    met = evaluate(model, test, kinds, hp)
    for k in kinds:
        if f"max_{k}" in cfg.metrics:
            table.add(name, r, f"max_{k}", met.max_risk[k])
    if "pooled_mse" in cfg.metrics:
        table.add(name, r, "pooled_mse", met.pooled_mse)
    if "env_mse" in cfg.metrics:
        for e, v in enumerate(met.env_risks["mse"]):
            table.add(name, r, f"env{e}_mse", v)
    if "mise" in cfg.metrics and X_eval is not None:
        table.add(name, r, "mise", mise(model, oracle, X_eval))
    if "runtime" in cfg.metrics:
        table.add(name, r, "runtime", dt)
    if isinstance(model, MaxRmForest):
        diags = model.diagnostics
        if "infeasible_trees" in cfg.metrics:
            table.add(name, r, "infeasible_trees", sum(not d.get("feasible", True) for d in diags))
        if "indeterminate_fraction" in cfg.metrics:
            tot = sum(d.get("n_leaves", 0) for d in diags)
            ind = sum(d.get("indeterminate", 0) for d in diags)
            table.add(name, r, "indeterminate_fraction", ind / max(tot, 1))


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, progress=None) -> ResultTable:
    """Repeat data generation, fitting and evaluation; see ResultTable for the output."""
    if cfg.kind == "bias_variance":
        return bias_variance_study(cfg)
    if cfg.kind == "indeterminacy":
        return indeterminacy_study(cfg, progress=progress)
    workers = cfg.workers if workers is None else workers
    jobs = [(cfg, r) for r in range(cfg.repetitions)]
    table = ResultTable()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_rep, jobs))
    else:
        parts = []
        for j in jobs:
            parts.append(_run_rep(j))
            if progress:
                progress(j[1], parts[-1])
    for p in parts:
        table.rows += p.rows
        table.failures += p.failures
    return table


# -- studies ------------------------------------------------------------------------

def bias_variance_study(cfg: ExperimentConfig) -> ResultTable:
    """Squared bias and variance of each method's predictions at fixed test points.

    Rows use rep = -1 since both quantities pool all repetitions.
    """
    d0 = cfg.dgp_config(cfg.seed)
    X_eval = sample_covariates(d0, cfg.eval_points, cfg.seed)
    preds = {m.name: [] for m in cfg.methods}
    infeasible = []
    oracle = None
    for r in range(cfg.repetitions):
        seed = rep_seed(cfg.seed, r)
        train, _, oracle = generate(cfg.dgp_config(seed))
        for m in cfg.methods:
            model = fit_method(m, train, seed)
            preds[m.name].append(model.predict(X_eval))
            if "infeasible_trees" in cfg.metrics and isinstance(model, MaxRmForest):
                bad = sum(not d.get("feasible", True) for d in model.diagnostics)
                infeasible.append((m.name, r, bad))
    if oracle is None:
        raise ConfigError("bias_variance needs a setting with a known oracle")
    f0 = oracle(X_eval)
    table = ResultTable()
    for name, P in preds.items():
        P = np.array(P)
        table.add(name, -1, "bias2", np.mean((P.mean(axis=0) - f0) ** 2))
        table.add(name, -1, "variance", np.mean(P.var(axis=0, ddof=1)))
    for name, r, bad in infeasible:
        table.add(name, r, "infeasible_trees", bad)
    return table


def revert_indeterminate(model: MaxRmForest) -> tuple:
    """Copy of the forest with indeterminate leaves set back to their RF means.

    Returns (predict function, fraction of indeterminate leaves).
    """
    from .cart import Forest
    trees, tot, ind = [], 0, 0
    for tree in model.forest.trees:
        mask = indeterminate_leaves(tree, model.risk)
        tot += tree.n_leaves
        ind += int(mask.sum())
        trees.append(tree.with_values(np.where(mask, tree.rf_values, tree.values)))
    forest = Forest(trees, model.forest.weights)
    return forest, ind / max(tot, 1)


def indeterminacy_study(cfg: ExperimentConfig, progress=None) -> ResultTable:
    table = ResultTable()
    for r in range(cfg.repetitions):
        seed = rep_seed(cfg.seed, r)
        train, test, _ = generate(cfg.dgp_config(seed))
        for m in cfg.methods:
            model = fit_method(m, train, seed)
            if not isinstance(model, MaxRmForest):
                raise ConfigError("indeterminacy study needs forest methods")
            met = evaluate(model, test, ("mse",))
            forest, frac = revert_indeterminate(model)
            met_rev = evaluate(forest, test, ("mse",))
            a, b = met.max_risk["mse"], met_rev.max_risk["mse"]
            table.add(m.name, r, "max_mse", a)
            table.add(m.name, r, "max_mse_reverted", b)
            table.add(m.name, r, "rel_change", abs(b - a) / abs(a))
            table.add(m.name, r, "indeterminate_fraction", frac)
        if progress:
            progress(r, table)
    return table


# -- tests of theory ---------------------------------------------------------------

def permutation_test(errA, errB, n_perm: int = 10000, seed: int = 0) -> float:
    """Paired sign-flip test of mean(errA - errB) = 0; two-sided, add-one smoothed."""
    a = np.asarray(errA, dtype=float)
    b = np.asarray(errB, dtype=float)
    if a.shape != b.shape:
        raise ValueError("errA and errB must have equal length")
    if len(a) < 2:
        raise ValueError("need at least two paired observations")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    d = a - b
    obs = abs(d.mean())
    rng = rng_for(seed, 30)
    hits = 0
    chunk = max(1, min(n_perm, 2_000_000 // max(len(d), 1)))
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, len(d))) * 2 - 1
        stat = np.abs((signs * d).mean(axis=1))
        hits += int(np.sum(stat >= obs - 1e-12 * max(obs, 1e-300)))
        done += m
    return (hits + 1) / (n_perm + 1)


@dataclass
class HullReport:
    n_mix: int
    violations: int
    max_excess: float
    vertex_max: float
    prop1: dict | None = None


def convexhull_risk_check(model, test: EnvDataset, spec: RiskSpec | str = "mse", n_mix: int = 1000,
                          seed: int = 0, tol: float = 1e-12) -> HullReport:
    """Mixture risks sum_k q_k R_k never exceed the largest vertex risk.

    q is drawn uniformly from the simplex (flat Dirichlet). For MSE and NRW the
    mixture risk of the empirical mixture distribution is exactly linear in q.
    """
    if n_mix < 1:
        raise ValueError("n_mix must be >= 1")
    kind = spec if isinstance(spec, str) else spec.kind
    off = np.zeros(test.K)
    if kind == "nrw":
        off = risk_offsets(test, "nrw")
    elif not isinstance(spec, str):
        off = spec.offsets
    pred = model.predict(test.X)
    R = prediction_risks(pred, test.y, test.env, test.K, off).risks
    Q = rng_for(seed, 31).dirichlet(np.ones(test.K), size=n_mix)
    mix = Q @ R
    vmax = float(R.max())
    exc = mix - vmax
    return HullReport(n_mix, int(np.sum(exc > tol)), float(exc.max()), vmax)


def prop1_check(model, cfg: DgpConfig, n_mix: int = 20, n_test: int = 20000, seed: int = 0):
    """Synthetic test environments with f = sum_k q_k f^{e_k} on a no-shift GP setting.

    Returns (max sampled-mixture MSE, max training-environment MSE, MC standard error).
    """
    from .dataplane import gen_gp_envs
    if cfg.setting != "gp-noshift":
        raise ValueError("the convex-hull generalization check uses the no-shift GP setting")
    big = DgpConfig(**{**cfg.__dict__, "n_test_per_env": n_test})
    _, test, _, fte = gen_gp_envs(big, return_f=True)
    F = np.stack([fte[test.env == e] for e in range(cfg.K)], axis=1)
    X = test.X[test.env == 0]
    pred = model.predict(X)
    noise = cfg.noise_sd * rng_for(seed, 32).standard_normal(len(X))
    env_mse = [float(np.mean((F[:, e] + noise - pred) ** 2)) for e in range(cfg.K)]
    Q = rng_for(seed, 33).dirichlet(np.ones(cfg.K), size=n_mix)
    mix, ses = [], []
    for q in Q:
        sq = (F @ q + noise - pred) ** 2
        mix.append(float(sq.mean()))
        ses.append(float(sq.std(ddof=1) / math.sqrt(len(sq))))
    i = int(np.argmax(mix))
    return mix[i], max(env_mse), ses[i]


@dataclass
class ConsistencyReport:
    n_grid: list
    median_excess: list
    non_increasing: bool
    excess: dict


def consistency_probe(tree, cfg: DgpConfig, n_grid=(500, 2000, 8000), reps: int = 20, seed: int = 0,
                      spec_kind: str = "mse", pop_n: int = 100_000,
                      solver: SolverConfig = PRECISE) -> ConsistencyReport:
    """Excess population max risk of leaf values fit on n samples, for a fixed partition.

    Population risks are approximated on a fresh sample of pop_n per environment;
    theta_0 is the solution on that sample. n is the per-environment sample size.
    """
    from dataclasses import replace
    big_cfg = replace(cfg, n_per_env=pop_n, n_total=None, seed=int(rng_for(seed, 40).integers(2**62)))
    pop, _, _ = generate(big_cfg)
    pop_stats = restat(tree, pop)
    off_pop = risk_offsets(pop, spec_kind) if spec_kind == "nrw" else np.zeros(pop.K)
    res0 = solve_posthoc(None, pop_stats, off_pop, solver)
    z0 = res0.z
    th_fill = res0.theta
    med, allx = [], {}
    for n in n_grid:
        ex = []
        for r in range(reps):
            s = int(rng_for(seed, 41, int(n), r).integers(2**62))
            train, _, _ = generate(replace(cfg, n_per_env=int(n), n_total=None, seed=s))
            st = restat(tree, train)
            off = risk_offsets(train, spec_kind) if spec_kind == "nrw" else np.zeros(train.K)
            # leaves without training rows keep the population solution's value
            th_init = st.pooled_means(fallback=th_fill)
            th = solve_posthoc(th_init, st, off, solver).theta
            ex.append(float(pop_stats.risks(th, off_pop).max() - z0))
        allx[int(n)] = ex
        med.append(float(np.median(ex)))
    noninc = all(med[i + 1] <= med[i] for i in range(len(med) - 1))
    return ConsistencyReport(list(n_grid), med, noninc, allx)
