"""MaxRM forest construction: post-hoc, local, global (DFS / NonDFS) and tree weights."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .cart import (Forest, Tree, TreeBuilder, TreeHyperparams, fit_cart_tree, midpoint,
                   sample_features)
from .dataplane import (TAG_BOOT, TAG_MTRY, DataError, EnvDataset, bootstrap_indices, rng_for,
                        stratified_split)
from .minimax import SolverConfig, SolverError, extragradient_weights, solve_posthoc
from .minimax import kernels as kn
from .risk import RiskSpec

KINDS = ("rf", "posthoc", "local", "global", "global-nondfs", "weights")


@dataclass(frozen=True)
class StrategySpec:
    kind: str = "posthoc"
    reweight: bool = False
    holdout_fraction: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        if self.kind == "weights" and not self.reweight:
            object.__setattr__(self, "reweight", True)

    @classmethod
    def parse(cls, name: str) -> "StrategySpec":
        """'posthoc', 'local-w', 'weights', ... ; a '-w' suffix adds reweighting."""
        rew = name.endswith("-w")
        kind = name[:-2] if rew else name
        if kind == "weights":
            rew = True
        return cls(kind, rew)

    @property
    def name(self) -> str:
        if self.kind == "weights":
            return "weights"
        return self.kind + ("-w" if self.reweight else "")


@dataclass
class MaxRmForest:
    forest: Forest
    strategy: StrategySpec
    risk: RiskSpec
    solver: SolverConfig
    hp: TreeHyperparams
    diagnostics: list = field(default_factory=list)
    holdout_z: float | None = None

    def predict(self, X) -> np.ndarray:
        return self.forest.predict(X)

    @property
    def trees(self):
        return self.forest.trees


# -- shared candidate sweep helpers -------------------------------------------

@njit(cache=True)
def _sorted_rows(X, idx, f):
    n = idx.shape[0]
    xs = np.empty(n)
    for i in range(n):
        xs[i] = X[idx[i], f]
    order = np.argsort(xs, kind="mergesort")
    return xs, order


@njit(cache=True)
def _node_totals(y, env, idx, K):
    c = np.zeros(K)
    s = np.zeros(K)
    q = np.zeros(K)
    for i in range(idx.shape[0]):
        r = idx[i]
        e = env[r]
        c[e] += 1.0
        s[e] += y[r]
        q[e] += y[r] * y[r]
    return c, s, q


@njit(cache=True)
def _cell(c, s, q):
    if c > 0:
        m = s / c
        d = q - s * m
        return m, d if d > 0 else 0.0
    return 0.0, 0.0


@njit(cache=True)
def best_local_split(X, y, env, idx, feats, min_leaf, frozen, inv_n, use_kkt,
                     gamma, tmax, delta, patience):
    """Best split of one node with the two child values solved exactly (others frozen).

    frozen_e is environment e's risk contribution from every other leaf (minus
    its offset). Returns (feature, threshold, z, a, b, fallback).
    """
    K = frozen.shape[0]
    n = idx.shape[0]
    best_f = -1
    best_thr = 0.0
    best_z = np.inf
    best_a = 0.0
    best_b = 0.0
    best_fb = False
    if n < 2 * min_leaf:
        return best_f, best_thr, best_z, best_a, best_b, best_fb
    tc, ts, tq = _node_totals(y, env, idx, K)
    ttot = tc.sum()
    tsum = ts.sum()
    cL = np.zeros(K)
    sL = np.zeros(K)
    qL = np.zeros(K)
    F = np.empty(K)
    wL = np.empty(K)
    wR = np.empty(K)
    mL = np.empty(K)
    mR = np.empty(K)
    for f in feats:
        xs, order = _sorted_rows(X, idx, f)
        cL[:] = 0.0
        sL[:] = 0.0
        qL[:] = 0.0
        pooled_l = 0.0
        for i in range(n - 1):
            r = idx[order[i]]
            e = env[r]
            cL[e] += 1.0
            sL[e] += y[r]
            qL[e] += y[r] * y[r]
            pooled_l += y[r]
            nl = i + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            lo = xs[order[i]]
            hi = xs[order[i + 1]]
            if not lo < hi:
                continue
            for k in range(K):
                ml, dl = _cell(cL[k], sL[k], qL[k])
                mr, dr = _cell(tc[k] - cL[k], ts[k] - sL[k], tq[k] - qL[k])
                mL[k] = ml
                mR[k] = mr
                wL[k] = cL[k] * inv_n[k]
                wR[k] = (tc[k] - cL[k]) * inv_n[k]
                F[k] = frozen[k] + (dl + dr) * inv_n[k]
            a0 = pooled_l / nl
            b0 = (tsum - pooled_l) / (ttot - nl)
            if use_kkt:
                a, b, z, st = kn.kkt2_kernel(F, wL, mL, wR, mR, a0, b0, gamma, tmax, delta, patience)
                fb = st == kn.STATUS_FALLBACK
            else:
                th, z, _, _, _ = kn.eg2_kernel(F, wL, mL, wR, mR, a0, b0, gamma, tmax, delta, patience)
                a = th[0]
                b = th[1]
                fb = False
            if z < best_z:
                best_z = z
                best_f = f
                best_thr = midpoint(lo, hi)
                best_a = a
                best_b = b
                best_fb = fb
    return best_f, best_thr, best_z, best_a, best_b, best_fb


@njit(cache=True)
def best_global_split(X, y, env, idx, feats, min_leaf, cnt, mu, ssd, base_off, inv_n,
                      theta, col, gamma, tmax, delta, patience):
    """Best split of leaf ``col`` when every leaf value is re-solved by extragradient.

    cnt/mu/ssd describe the current partition (K x T); the two children take
    column ``col`` and a new last column, both warm-started at theta[col].
    Returns (feature, threshold, z, theta_new).
    """
    K, T = cnt.shape
    n = idx.shape[0]
    best_f = -1
    best_thr = 0.0
    best_z = np.inf
    best_th = np.empty(T + 1)
    if n < 2 * min_leaf:
        return best_f, best_thr, best_z, best_th
    cnt2 = np.zeros((K, T + 1))
    mu2 = np.zeros((K, T + 1))
    cnt2[:, :T] = cnt
    mu2[:, :T] = mu
    # deviations of all leaves except col, per environment
    base_other = np.empty(K)
    for e in range(K):
        s = 0.0
        for t in range(T):
            if t != col:
                s += ssd[e, t]
        base_other[e] = s * inv_n[e] - base_off[e]
    th0 = np.empty(T + 1)
    th0[:T] = theta
    th0[T] = theta[col]
    base = np.empty(K)
    tc, ts, tq = _node_totals(y, env, idx, K)
    cL = np.zeros(K)
    sL = np.zeros(K)
    qL = np.zeros(K)
    for f in feats:
        xs, order = _sorted_rows(X, idx, f)
        cL[:] = 0.0
        sL[:] = 0.0
        qL[:] = 0.0
        for i in range(n - 1):
            r = idx[order[i]]
            e = env[r]
            cL[e] += 1.0
            sL[e] += y[r]
            qL[e] += y[r] * y[r]
            nl = i + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            lo = xs[order[i]]
            hi = xs[order[i + 1]]
            if not lo < hi:
                continue
            for k in range(K):
                ml, dl = _cell(cL[k], sL[k], qL[k])
                mr, dr = _cell(tc[k] - cL[k], ts[k] - sL[k], tq[k] - qL[k])
                cnt2[k, col] = cL[k]
                mu2[k, col] = ml
                cnt2[k, T] = tc[k] - cL[k]
                mu2[k, T] = mr
                base[k] = base_other[k] + (dl + dr) * inv_n[k]
            if K == 1:
                # single environment: the minimizer is the leaf means
                th = th0.copy()
                for t in range(T + 1):
                    if cnt2[0, t] > 0:
                        th[t] = mu2[0, t]
                z = base[0]
            else:
                th, z, _, _, st = kn.eg_kernel(cnt2, mu2, base, inv_n, th0, gamma, tmax, delta,
                                               patience)
            if z < best_z:
                best_z = z
                best_f = f
                best_thr = midpoint(lo, hi)
                best_th[:] = th
    return best_f, best_thr, best_z, best_th


# -- tree growers ---------------------------------------------------------------

def _compress(ds: EnvDataset, offsets):
    """Relabel so that only environments present in ds remain."""
    present = np.flatnonzero(ds.n_e > 0)
    remap = np.full(ds.K, -1, dtype=np.int64)
    remap[present] = np.arange(len(present))
    envc = np.ascontiguousarray(remap[ds.env])
    inv_n = 1.0 / ds.n_e[present].astype(float)
    off = np.zeros(ds.K) if offsets is None else np.asarray(offsets, dtype=float)
    return envc, len(present), inv_n, off[present].copy(), present


def _improves(z_new, z_cur):
    return z_new < z_cur - 1e-9 * max(1.0, abs(z_cur))


def _z_of(stats_rows, theta, inv_n, off, K):
    cnt, mu, ssd = stats_rows
    R = (ssd.sum(axis=1) + (cnt * (mu - theta[None, :]) ** 2).sum(axis=1)) * inv_n - off
    return R


def grow_tree_local(ds: EnvDataset, spec: RiskSpec, hp: TreeHyperparams,
                    solver: SolverConfig = SolverConfig(), rng=None) -> Tree:
    """Depth-first growth; each candidate solves its two child values with the rest frozen."""
    rng = rng if rng is not None else rng_for(hp.seed, TAG_MTRY, 0)
    m = hp.mtry_for(ds.p)
    X, y = np.ascontiguousarray(ds.X), np.ascontiguousarray(ds.y)
    envc, K, inv_n, off, _ = _compress(ds, spec.offsets)
    use_kkt = K <= 3
    # per-environment squared error of every current leaf at its current value
    idx0 = np.arange(ds.n, dtype=np.int64)
    v0 = float(y.mean())
    leaf_sse = {0: np.bincount(envc, weights=(y - v0) ** 2, minlength=K)}
    values = {0: v0}
    total_sse = leaf_sse[0].copy()
    b = TreeBuilder()
    rows = {}
    fallbacks = 0
    z_claim = float((total_sse * inv_n - off).max())
    stack = [(0, idx0, 0)]
    while stack:
        node, idx, depth = stack.pop()
        rows[node] = idx
        if (hp.max_depth is not None and depth >= hp.max_depth) or len(idx) < 2 * hp.min_leaf_size:
            continue
        feats = sample_features(rng, ds.p, m)
        frozen = (total_sse - leaf_sse[node]) * inv_n - off
        z_cur = float((total_sse * inv_n - off).max())
        f, thr, z, a, bv, fb = best_local_split(
            X, y, envc, idx, feats, hp.min_leaf_size, frozen, inv_n, use_kkt,
            solver.gamma, solver.t_max, solver.delta, solver.patience)
        if f < 0 or not _improves(z, z_cur):
            continue
        fallbacks += int(fb)
        z_claim = z
        lc, rc = b.split(node, f, thr)
        go = X[idx, f] <= thr
        il, ir = idx[go], idx[~go]
        total_sse = total_sse - leaf_sse.pop(node)
        for c, ii, v in ((lc, il, a), (rc, ir, bv)):
            values[c] = v
            leaf_sse[c] = np.bincount(envc[ii], weights=(y[ii] - v) ** 2, minlength=K)
            total_sse = total_sse + leaf_sse[c]
        del rows[node]
        stack.append((rc, ir, depth + 1))
        stack.append((lc, il, depth + 1))
    tree = b.finalize(rows, ds, values)
    tree.info["kkt_fallbacks"] = fallbacks
    tree.info["z"] = z_claim
    return tree


class _Partition:
    """Column-wise leaf statistics of the current partition (compressed envs)."""

    def __init__(self, y, envc, K, idx):
        self.y, self.envc, self.K = y, envc, K
        self.cnt = np.zeros((K, 0))
        self.mu = np.zeros((K, 0))
        self.ssd = np.zeros((K, 0))
        self.set_col(None, idx)

    def _col_stats(self, idx):
        e, yy = self.envc[idx], self.y[idx]
        c = np.bincount(e, minlength=self.K).astype(float)
        s = np.bincount(e, weights=yy, minlength=self.K)
        m = np.divide(s, c, out=np.zeros(self.K), where=c > 0)
        d = np.bincount(e, weights=(yy - m[e]) ** 2, minlength=self.K)
        return c, m, d

    def set_col(self, col, idx):
        c, m, d = self._col_stats(idx)
        if col is None:
            self.cnt = np.column_stack([self.cnt, c])
            self.mu = np.column_stack([self.mu, m])
            self.ssd = np.column_stack([self.ssd, d])
            return self.cnt.shape[1] - 1
        self.cnt[:, col], self.mu[:, col], self.ssd[:, col] = c, m, d
        return col

    def arrays(self):
        return (np.ascontiguousarray(self.cnt), np.ascontiguousarray(self.mu),
                np.ascontiguousarray(self.ssd))


def grow_tree_global(ds: EnvDataset, spec: RiskSpec, hp: TreeHyperparams,
                     solver: SolverConfig = SolverConfig(), dfs: bool = True, rng=None) -> Tree:
    """Growth where every candidate split is scored by re-solving all leaf values.

    dfs=True expands nodes depth first; dfs=False (NonDFS) executes, at each step,
    the best (leaf, split) pair over the whole partition.
    """
    rng = rng if rng is not None else rng_for(hp.seed, TAG_MTRY, 0)
    m = hp.mtry_for(ds.p)
    X, y = np.ascontiguousarray(ds.X), np.ascontiguousarray(ds.y)
    envc, K, inv_n, off, _ = _compress(ds, spec.offsets)
    idx0 = np.arange(ds.n, dtype=np.int64)
    part = _Partition(y, envc, K, idx0)
    theta = np.array([y.mean()])
    z_cur = float(_z_of(part.arrays(), theta, inv_n, off, K).max())
    b = TreeBuilder()
    col_of = {0: 0}
    rows = {0: idx0}
    depth_of = {0: 0}
    feats_of = {}
    cfg = (solver.gamma, solver.t_max, solver.delta, solver.patience)
    accepted = 0

    def can_split(node):
        d = depth_of[node]
        return (hp.max_depth is None or d < hp.max_depth) and len(rows[node]) >= 2 * hp.min_leaf_size

    def score(node):
        cnt, mu, ssd = part.arrays()
        return best_global_split(X, y, envc, rows[node], feats_of[node], hp.min_leaf_size,
                                 cnt, mu, ssd, off, inv_n, theta, col_of[node], *cfg)

    def execute(node, f, thr, th_new):
        nonlocal theta, accepted
        idx = rows.pop(node)
        go = X[idx, f] <= thr
        lc, rc = b.split(node, f, thr)
        c = col_of.pop(node)
        rows[lc], rows[rc] = idx[go], idx[~go]
        col_of[lc] = part.set_col(c, idx[go])
        col_of[rc] = part.set_col(None, idx[~go])
        depth_of[lc] = depth_of[rc] = depth_of[node] + 1
        theta = th_new.copy()
        accepted += 1
        return lc, rc

    if dfs:
        stack = [0]
        while stack:
            node = stack.pop()
            if not can_split(node):
                continue
            feats_of[node] = sample_features(rng, ds.p, m)
            f, thr, z, th_new = score(node)
            if f < 0 or not _improves(z, z_cur):
                continue
            lc, rc = execute(node, f, thr, th_new)
            z_cur = z
            stack.append(rc)
            stack.append(lc)
    else:
        frontier = [0]
        while True:
            best = None
            for node in frontier:
                if not can_split(node):
                    continue
                if node not in feats_of:
                    # m_try subset drawn once per region
                    feats_of[node] = sample_features(rng, ds.p, m)
                f, thr, z, th_new = score(node)
                if f >= 0 and (best is None or z < best[3]):
                    best = (node, f, thr, z, th_new)
            if best is None or not _improves(best[3], z_cur):
                break
            node, f, thr, z, th_new = best
            lc, rc = execute(node, f, thr, th_new)
            z_cur = z
            frontier.remove(node)
            frontier += [lc, rc]
    values = {node: theta[col] for node, col in col_of.items()}
    tree = b.finalize(rows, ds, values)
    tree.info["accepted_splits"] = accepted
    tree.info["z"] = z_cur
    return tree


def posthoc_adjust(tree: Tree, ds: EnvDataset, spec: RiskSpec,
                   solver: SolverConfig = SolverConfig()) -> Tree:
    """Replace leaf values by the min-max solution, started from the RF leaf means.

    ``ds`` must be the sample the tree was fit on (its statistics are cached).
    If the solver ends above the max risk of the starting values, those are kept.
    """
    stats = tree.stats
    if stats is None or stats.count.sum() != ds.n:
        from .cart import restat
        stats = restat(tree, ds)
    th0 = tree.rf_values if tree.rf_values is not None else stats.pooled_means()
    res = solve_posthoc(th0, stats, spec.offsets, solver)
    keep = stats.nonempty()
    z0 = float(stats.risks(th0, spec.offsets)[keep].max())
    theta, z = res.theta, res.z
    # environments carrying dual weight are the worst-case ones at the saddle point
    dual_active = tuple(int(e) for e in np.flatnonzero(res.p > 0))
    if res.z > z0:
        theta, z, dual_active = th0, z0, None
    return tree.with_values(theta, z=z, solver_iterations=res.iterations,
                            solver_converged=res.converged, solver_z=res.z,
                            dual_active=dual_active)


# -- diagnostics -----------------------------------------------------------------

def tree_diagnostics(tree: Tree, spec: RiskSpec) -> dict:
    st = tree.stats
    r = st.risks(tree.values, spec.offsets)
    keep = st.nonempty()
    z = float(r[keep].max())
    active = np.flatnonzero(keep & (r >= z - 1e-9 * max(1.0, abs(z))))
    dual = tree.info.get("dual_active")
    if dual:
        # ties among risks are only as exact as the solver; the dual support is not
        active = np.union1d(active, np.asarray(dual, dtype=np.int64))
    indet = (st.count[active].sum(axis=0) == 0)
    # z claimed by the solver or grower, checked against risks recomputed from rows
    claimed = float(tree.info.get("z", z))
    return {
        **{k: v for k, v in tree.info.items() if isinstance(v, (int, float, bool))},
        "z": z,
        "claimed_z": claimed,
        "risks": r.tolist(),
        "active": active.tolist(),
        "n_leaves": tree.n_leaves,
        "indeterminate": int(indet.sum()),
        "feasible": bool((r[keep] <= claimed + 1e-9).all()),
    }


def indeterminate_leaves(tree: Tree, spec: RiskSpec, active=None) -> np.ndarray:
    """Leaves holding no observation from any active environment."""
    st = tree.stats
    if active is None:
        active = tree_diagnostics(tree, spec)["active"]
    return st.count[np.asarray(active, dtype=int)].sum(axis=0) == 0


# -- forests ----------------------------------------------------------------------

def _build_tree(args):
    ds, kind, spec, solver, hp, seed, b, bootstrap = args
    if bootstrap:
        idx = bootstrap_indices(ds.n, seed, (TAG_BOOT, b))
    else:
        idx = np.arange(ds.n)
    boot = ds.subset(idx)
    rng = rng_for(seed, TAG_MTRY, b)
    if kind in ("rf", "weights"):
        tree = fit_cart_tree(boot, hp, rng=rng)
    elif kind == "posthoc":
        tree = posthoc_adjust(fit_cart_tree(boot, hp, rng=rng), boot, spec, solver)
    elif kind == "local":
        tree = grow_tree_local(boot, spec, hp, solver, rng=rng)
    elif kind == "global":
        tree = grow_tree_global(boot, spec, hp, solver, dfs=True, rng=rng)
    elif kind == "global-nondfs":
        tree = grow_tree_global(boot, spec, hp, solver, dfs=False, rng=rng)
    else:
        raise ValueError(kind)
    try:
        diag = tree_diagnostics(tree, spec)
    except Exception:  # pragma: no cover - diagnostics never block a fit
        diag = {}
    diag["tree"] = b
    return tree, diag


def fit_trees(ds, kind, spec, solver, hp, B, seed, workers=1, bootstrap=True):
    jobs = [(ds, kind, spec, solver, hp, seed, b, bootstrap) for b in range(B)]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers > 1 and B > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_build_tree, jobs, chunksize=max(1, B // (4 * workers))))
    else:
        out = []
        for j in jobs:
            try:
                out.append(_build_tree(j))
            except SolverError as err:
                raise SolverError(f"tree {j[6]}: {err}") from err
    return [t for t, _ in out], [d for _, d in out]


def optimize_tree_weights(model: MaxRmForest, holdout: EnvDataset,
                          solver: SolverConfig = SolverConfig()) -> MaxRmForest:
    """Re-weight the trees on held-out data, keeping partitions and leaf values."""
    H = model.forest.tree_predictions(holdout.X)
    w, z = extragradient_weights(H, holdout.y, holdout.env, holdout.K, model.risk.offsets, solver)
    model.forest = Forest(model.forest.trees, w)
    model.holdout_z = z
    return model


def fit_maxrm_forest(ds: EnvDataset, strategy: StrategySpec, spec: RiskSpec,
                     solver: SolverConfig = SolverConfig(), hp: TreeHyperparams = TreeHyperparams(),
                     B: int = 100, seed: int = 0, workers: int = 1,
                     bootstrap: bool = True) -> MaxRmForest:
    """Fit B trees of the given strategy; bootstrap=False fits every tree on ds itself."""
    if B < 1:
        raise ValueError("B must be >= 1")
    empty = np.flatnonzero(ds.n_e == 0)
    if len(empty):
        raise DataError(f"environment(s) {empty.tolist()} have no rows")
    if spec.K != ds.K:
        raise ValueError("risk offsets do not match the number of environments")
    fit_ds, hold = ds, None
    if strategy.reweight:
        i_fit, i_hold = stratified_split(ds, strategy.holdout_fraction, seed)
        fit_ds, hold = ds.subset(i_fit), ds.subset(i_hold)
    trees, diags = fit_trees(fit_ds, strategy.kind, spec, solver, hp, B, seed, workers, bootstrap)
    model = MaxRmForest(Forest(trees), strategy, spec, solver, hp, diags)
    if strategy.reweight:
        optimize_tree_weights(model, hold, solver)
    return model
