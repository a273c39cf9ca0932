"""Reproduction criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line to LINES; conftest prints them after the
run. The experiments are cached so the feasibility criterion reuses their fits.
Set MAXRM_ACCEPT_OUT to a directory to keep the per-repetition CSVs.
"""
import functools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from maxrm.baselines import oracle_analytic_risks
from maxrm.cart import TreeHyperparams, fit_cart_tree
from maxrm.cli import load_config
from maxrm.dataplane import default_config, generate
from maxrm.evalharness import (ExperimentConfig, consistency_probe, convexhull_risk_check,
                               run_experiment)
from maxrm.minimax import PRECISE, LeafEnvStats, SolverConfig, bcd_posthoc, extragradient_posthoc, kkt_local_solve
from maxrm.risk import RiskSpec
from maxrm.strategies import StrategySpec, fit_maxrm_forest
from oracles import dual_minimax, random_instance, two_leaf_minimax

pytestmark = pytest.mark.acceptance

LINES = []

# method name in the preset -> (reference mean, reference CI half-width) for the max test MSE
TABLE1 = {
    "rf": (24.88, 0.46),
    "posthoc": (16.75, 0.32),
    "local": (18.06, 0.34),
    "global": (16.54, 0.28),
    "global-nondfs": (16.55, 0.29),
    "weights": (20.90, 0.62),
    "posthoc-w": (17.12, 0.43),
}


def _line(n, ok, detail):
    LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@functools.lru_cache(maxsize=None)
def _experiment(preset, keep=None, extra_metrics=()):
    raw = load_config(preset)
    if keep is not None:
        raw["methods"] = [m for m in raw["methods"] if m["name"] in keep]
    raw["metrics"] = list(dict.fromkeys(list(raw["metrics"]) + list(extra_metrics)))
    cfg = ExperimentConfig.from_dict(raw)
    t0 = time.time()
    table = run_experiment(cfg, workers=1)
    table.extras["seconds"] = time.time() - t0
    out = os.environ.get("MAXRM_ACCEPT_OUT")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        table.write_csv(Path(out) / f"{preset}_per_rep.csv", Path(out) / f"{preset}_aggregate.csv")
    return table


def _table1():
    return _experiment("table1", keep=tuple(TABLE1))


def _table2():
    return _experiment("table2", extra_metrics=("infeasible_trees",))


def _ci(table, m, k):
    return {(a, b): ci for a, b, _, ci in table.aggregate()}[(m, k)]


def test_c1_analytic_oracles():
    vals = [oracle_analytic_risks((5 / 4, 9 / 4))[1], oracle_analytic_risks((5 / 3, 11 / 6))[1],
            oracle_analytic_risks((2.4, -2.4), "mixture")[1], oracle_analytic_risks((0, 0), "mixture")[1]]
    ref = [16.58, 25.29, 18.28, 49.0]
    err = max(abs(a - b) for a, b in zip(vals, ref))
    ok = _line(1, err <= 0.01, "oracle risks " + ", ".join(f"{v:.4f}" for v in vals) + f" (max error {err:.4f})")
    assert ok


def test_c2_table1():
    t = _table1()
    assert not t.failures, t.failures
    parts, ok = [], True
    for m, (mu, ci) in TABLE1.items():
        got = t.mean(m, "max_mse")
        inside = abs(got - mu) <= 2 * ci
        ok &= inside
        parts.append(f"{m} {got:.2f} vs {mu:.2f}+/-{2 * ci:.2f}{'' if inside else ' (out)'}")
    g, p, l, w, r = (t.mean(m, "max_mse") for m in ("global", "posthoc", "local", "weights", "rf"))
    slack = max(_ci(t, "global", "max_mse"), _ci(t, "posthoc", "max_mse"))
    order = g <= p + slack and p < l < w < r
    parts.append(f"ordering {'holds' if order else 'violated'}")
    ok = _line(2, ok and order, "; ".join(parts) + f" [{t.extras['seconds']:.0f}s]")
    assert ok


def test_c3_solvers():
    t = _experiment("table3")
    assert not t.failures, t.failures
    eg, bcd = t.mean("posthoc-eg", "max_mse"), t.mean("posthoc-bcd", "max_mse")
    ok_tab = abs(eg - 16.76) <= 0.7 and abs(bcd - 17.36) <= 0.7
    rng = np.random.default_rng(2024)
    worst = 0.0
    # default block size 15, so every instance here is a single block
    bcd_cfg = SolverConfig(method="bcd", gamma=0.01, t_max=200, delta=1e-12, patience=1,
                           inner_t_max=50000, inner_patience=5000)
    # diagnostic only: blocks of 2 stall where no single block can lower the max
    bcd_small_blocks = SolverConfig(method="bcd", gamma=0.01, t_max=200, delta=1e-12, patience=1,
                                    inner_t_max=50000, inner_patience=5000, block_size=2)
    stall = 0.0
    for _ in range(100):
        T, K = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        leaf, y, env = random_instance(rng, T, K)
        s = LeafEnvStats.from_assignment(leaf, y, env, K, T)
        z_ref = dual_minimax(leaf, y, env, K, T)
        z_eg = extragradient_posthoc(None, s, cfg=PRECISE).z
        z_bcd = bcd_posthoc(None, s, cfg=bcd_cfg).z
        worst = max(worst, abs(z_eg - z_ref), abs(z_bcd - z_ref), abs(z_eg - z_bcd))
        stall = max(stall, bcd_posthoc(None, s, cfg=bcd_small_blocks).z - z_ref)
    ok_small = worst <= 1e-3
    ok = _line(3, ok_tab and ok_small,
               f"EG {eg:.2f} (reference 16.76), BCD {bcd:.2f} (reference 17.36), tolerance 0.7; "
               f"precise {t.mean('posthoc-precise', 'max_mse'):.2f}, RF {t.mean('rf', 'max_mse'):.2f}; "
               f"small instances max gap {worst:.2e} (blocks of 2: {stall:.2f} above optimum) "
               f"[{t.extras['seconds']:.0f}s]")
    assert ok


def test_c4_bias_variance():
    t = _table2()
    b_t, v_t = t.mean("MaxRM-RT", "bias2"), t.mean("MaxRM-RT", "variance")
    b_f, v_f = t.mean("MaxRM-RF", "bias2"), t.mean("MaxRM-RF", "variance")
    ok = _line(4, v_f <= v_t / 10 and b_f <= b_t,
               f"tree bias2 {b_t:.4f} var {v_t:.4f}; forest bias2 {b_f:.4f} var {v_f:.4f} "
               f"[{t.extras['seconds']:.0f}s]")
    assert ok


def test_c5_shift():
    t = _experiment("fig3")
    assert not t.failures, t.failures
    rf, ph = t.values("rf", "max_mse"), t.values("posthoc", "max_mse")
    frac = float(np.mean(ph < rf))
    mag = t.mean("magging", "max_mse")
    ok = _line(5, frac >= 0.8 and mag >= ph.mean(),
               f"posthoc < RF in {frac:.0%} of {len(rf)} reps; means RF {rf.mean():.4f}, "
               f"posthoc {ph.mean():.4f}, magging {mag:.4f} [{t.extras['seconds']:.0f}s]")
    assert ok


def test_c6_identical():
    t = _experiment("fig4")
    assert not t.failures, t.failures
    rf, ph = t.mean("rf", "max_mse"), t.mean("posthoc", "max_mse")
    rel = abs(ph - rf) / rf
    ok = _line(6, rel <= 0.05, f"RF {rf:.4f}, posthoc {ph:.4f}, relative gap {rel:.2%} "
                               f"(magging {t.mean('magging', 'max_mse'):.4f}) [{t.extras['seconds']:.0f}s]")
    assert ok


def test_c7_convex_hull():
    train, test, _ = generate(default_config("pwl", n_total=1000, seed=7))
    hp = TreeHyperparams(min_leaf_size=15)
    model = fit_maxrm_forest(train, StrategySpec("posthoc"), RiskSpec.mse(3), SolverConfig(), hp,
                             B=20, seed=7)
    reps = {}
    for data_name, ds in (("train", train), ("test", test)):
        for kind in ("mse", "nrw"):
            reps[(data_name, kind)] = convexhull_risk_check(model, ds, kind, n_mix=1000, seed=3)
    bad = sum(r.violations for r in reps.values())
    worst = max(r.max_excess for r in reps.values())
    ok = _line(7, bad == 0, f"{len(reps)} checks x 1000 mixtures, {bad} violations, "
                            f"largest mixture minus vertex max {worst:.3g}")
    assert ok


def test_c8_consistency():
    cfg = default_config("pwl", n_per_env=333, seed=11)
    ds, _, _ = generate(cfg)
    tree = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=15))
    t0 = time.time()
    rep = consistency_probe(tree, cfg, n_grid=(500, 2000, 8000), reps=20, seed=5)
    last = rep.median_excess[-1]
    # supplementary, does not enter the verdict: same probe on a depth-3 partition
    small = fit_cart_tree(ds, TreeHyperparams(min_leaf_size=15, max_depth=3))
    rep_s = consistency_probe(small, cfg, n_grid=(500, 2000, 8000), reps=20, seed=5)
    ok = _line(8, rep.non_increasing and last <= 0.05,
               f"{tree.n_leaves} leaves, median excess " +
               ", ".join(f"n={n}: {v:.4f}" for n, v in zip(rep.n_grid, rep.median_excess)) +
               f"; depth-3 partition ({small.n_leaves} leaves): " +
               ", ".join(f"{v:.4f}" for v in rep_s.median_excess) + f" [{time.time() - t0:.0f}s]")
    assert ok


def _kkt_case(rng, K):
    nL = rng.integers(0, 6, K).astype(float)
    nR = rng.integers(0, 6, K).astype(float)
    nR[(nL + nR) == 0] = 1
    mL, mR = rng.normal(0, 4, K), rng.normal(0, 4, K)
    sL, sR = nL * rng.random(K), nR * rng.random(K)
    F = rng.random(K) * rng.integers(0, 2, K)
    return nL, mL, sL, nR, mR, sR, F


def test_c9_feasibility_and_kkt():
    tables = {"table1": _table1(), "table3": _experiment("table3"), "table2": _table2(),
              "fig3": _experiment("fig3"), "fig4": _experiment("fig4")}
    n_models, n_bad = 0, 0
    for t in tables.values():
        for m in t.methods():
            if "infeasible_trees" in t.metrics(m):
                v = t.values(m, "infeasible_trees")
                n_models += len(v)
                n_bad += int(v.sum())
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(1000):
        K = int(rng.integers(1, 4))
        nL, mL, sL, nR, mR, sR, F = _kkt_case(rng, K)
        sol = kkt_local_solve((nL, mL, sL), (nR, mR, sR), F)
        worst = max(worst, abs(sol.z - two_leaf_minimax(F, nL, mL, sL, nR, mR, sR)))
    ok = _line(9, n_bad == 0 and worst <= 1e-3,
               f"{n_bad} infeasible trees across {n_models} fitted forests; "
               f"KKT vs grid on 1000 instances max gap {worst:.2e}")
    assert ok


def test_c10_indeterminacy():
    t = _experiment("appD3")
    rel = t.values("posthoc", "rel_change")
    frac = t.values("posthoc", "indeterminate_fraction")
    ok = _line(10, rel.max() <= 0.02 and frac.mean() < 0.05,
               f"relative change mean {rel.mean():.3%} max {rel.max():.3%}; "
               f"indeterminate leaves {frac.mean():.3%} [{t.extras['seconds']:.0f}s]")
    assert ok
