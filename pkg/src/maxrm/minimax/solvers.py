"""Solvers for min_theta max_e R_e(theta) on a fixed partition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as kn
from ..dataplane import DataError
from .stats import LeafEnvStats

METHODS = ("eg", "bcd", "kkt")


class SolverError(RuntimeError):
    """Non-finite risks or an unusable solver configuration."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "eg"
    gamma: float = 0.1
    t_max: int = 100
    delta: float = 1e-3
    patience: int = 5
    block_size: int = 15
    # inner extragradient of each BCD block
    inner_t_max: int = 50
    inner_patience: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.gamma > 0 or not self.delta > 0:
            raise ValueError("gamma and delta must be > 0")
        if self.patience < 1 or self.block_size < 1 or self.t_max < 0:
            raise ValueError("patience and block_size must be >= 1, t_max >= 0")

    @classmethod
    def bcd(cls, **kw):
        kw.setdefault("patience", 1)
        return cls(method="bcd", **kw)


# near-exact settings used where the solver itself is under test
PRECISE = SolverConfig(gamma=0.01, t_max=50000, delta=1e-12, patience=5000)


@dataclass
class SolverResult:
    theta: np.ndarray
    z: float
    p: np.ndarray
    iterations: int
    converged: bool
    risks: np.ndarray = field(default=None)
    active: np.ndarray = field(default=None)
    fallback: bool = False


def project_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty vector")
    return kn.proj_simplex(v)


def active_set(risks, included=None, tol=1e-9) -> np.ndarray:
    r = np.asarray(risks, dtype=float)
    inc = np.ones(len(r), bool) if included is None else np.asarray(included, bool)
    z = r[inc].max()
    return np.flatnonzero(inc & (r >= z - tol * max(1.0, abs(z))))


def weighted_leaf_means(p, stats: LeafEnvStats, theta_in=None, return_flags=False):
    """Minimizer of sum_e p_e R_e(theta); leaves with no weight keep theta_in."""
    p = np.asarray(p, dtype=float)
    th0 = stats.pooled_means() if theta_in is None else np.asarray(theta_in, dtype=float)
    th, indet = kn.weighted_means_kernel(stats.count, stats.mean, stats.inv_n(), p, th0)
    return (th, indet) if return_flags else th


def _prepare(stats: LeafEnvStats, offsets, theta0):
    keep = stats.nonempty()
    if not keep.any():
        raise SolverError("every environment is empty")
    inv_n = stats.inv_n()
    off = np.zeros(stats.K) if offsets is None else np.asarray(offsets, dtype=float)
    base = stats.ssd.sum(axis=1) * inv_n - off
    theta0 = stats.pooled_means() if theta0 is None else np.asarray(theta0, dtype=float).copy()
    return keep, np.ascontiguousarray(stats.count[keep]), np.ascontiguousarray(stats.mean[keep]), \
        base[keep].copy(), inv_n[keep].copy(), theta0, off


def _finish(stats, offsets, theta, z, p_sub, keep, it, status):
    if status == kn.STATUS_NONFINITE or not np.isfinite(z):
        raise SolverError("non-finite risk encountered; check the scale of y and the step size")
    p = np.zeros(stats.K)
    p[keep] = p_sub
    r = stats.risks(theta, offsets)
    z = float(r[keep].max())
    return SolverResult(np.asarray(theta), z, p, int(it), status == kn.STATUS_PATIENCE,
                        r, active_set(r, keep))


def extragradient_posthoc(theta0, stats: LeafEnvStats, offsets=None,
                          cfg: SolverConfig = SolverConfig()) -> SolverResult:
    """Extragradient leaf-value optimization started from theta0 (RF means by default)."""
    keep, cnt, mu, base, inv_n, th0, off = _prepare(stats, offsets, theta0)
    if cnt.shape[0] == 1:
        return _single_env(stats, offsets, th0, keep)
    th, z, p, it, st = kn.eg_kernel(cnt, mu, base, inv_n, th0, cfg.gamma, cfg.t_max,
                                    cfg.delta, cfg.patience)
    return _finish(stats, offsets, th, z, p, keep, it, st)


def bcd_posthoc(theta0, stats: LeafEnvStats, offsets=None,
                cfg: SolverConfig = SolverConfig.bcd()) -> SolverResult:
    """Cyclic block-coordinate descent, each block solved by extragradient."""
    keep, cnt, mu, base, inv_n, th0, off = _prepare(stats, offsets, theta0)
    if cnt.shape[0] == 1:
        return _single_env(stats, offsets, th0, keep)
    th, z, p, it, st = kn.bcd_kernel(cnt, mu, base, inv_n, th0, cfg.gamma, cfg.t_max, cfg.delta,
                                     cfg.patience, cfg.block_size, cfg.inner_t_max,
                                     cfg.inner_patience)
    return _finish(stats, offsets, th, z, p, keep, it, st)


def _single_env(stats, offsets, th0, keep):
    # one nonempty environment: its leaf means are the exact minimizer
    e = int(np.flatnonzero(keep)[0])
    th = np.where(stats.count[e] > 0, stats.mean[e], th0)
    p = np.zeros(stats.K)
    p[e] = 1.0
    r = stats.risks(th, offsets)
    return SolverResult(th, float(r[e]), p, 0, True, r, np.array([e]))


def solve_posthoc(theta0, stats, offsets=None, cfg: SolverConfig = SolverConfig()) -> SolverResult:
    if cfg.method == "bcd":
        return bcd_posthoc(theta0, stats, offsets, cfg)
    if cfg.method == "kkt":
        if stats.T != 2:
            raise SolverError("the KKT solver handles exactly two free leaf values")
        return _kkt_on_stats(theta0, stats, offsets, cfg)
    return extragradient_posthoc(theta0, stats, offsets, cfg)


@dataclass
class LocalSolution:
    theta_left: float
    theta_right: float
    z: float
    fallback: bool


def kkt_local_solve(stats_left, stats_right, frozen, n_e=None, theta_init=(0.0, 0.0),
                    cfg: SolverConfig = SolverConfig()) -> LocalSolution:
    """Best values of two sibling leaves with every other leaf frozen.

    ``stats_left``/``stats_right`` are (count, mean, ssd) triples of length K,
    ``frozen`` the per-environment risk contribution of everything else
    (other leaves' squared error divided by n_e, minus the offset) and ``n_e``
    the per-environment totals (defaults to the children's counts).
    """
    nL, mL, sL = (np.asarray(a, dtype=float) for a in stats_left)
    nR, mR, sR = (np.asarray(a, dtype=float) for a in stats_right)
    F = np.asarray(frozen, dtype=float)
    n_e = nL + nR if n_e is None else np.asarray(n_e, dtype=float)
    keep = n_e > 0
    if not keep.any():
        raise SolverError("every environment is empty")
    inv = 1.0 / n_e[keep]
    Fk = F[keep] + (sL[keep] + sR[keep]) * inv
    a, b, z, st = kn.kkt2_kernel(Fk, nL[keep] * inv, mL[keep], nR[keep] * inv, mR[keep],
                                 float(theta_init[0]), float(theta_init[1]),
                                 cfg.gamma, cfg.t_max, cfg.delta, cfg.patience)
    return LocalSolution(a, b, z, st == kn.STATUS_FALLBACK)


def _kkt_on_stats(theta0, stats, offsets, cfg):
    keep = stats.nonempty()
    off = np.zeros(stats.K) if offsets is None else np.asarray(offsets, dtype=float)
    th0 = stats.pooled_means() if theta0 is None else np.asarray(theta0, dtype=float)
    sol = kkt_local_solve((stats.count[:, 0], stats.mean[:, 0], stats.ssd[:, 0]),
                          (stats.count[:, 1], stats.mean[:, 1], stats.ssd[:, 1]),
                          -off, stats.n_e, th0, cfg)
    th = np.array([sol.theta_left, sol.theta_right])
    r = stats.risks(th, offsets)
    return SolverResult(th, float(r[keep].max()), np.zeros(stats.K), 0, not sol.fallback,
                        r, active_set(r, keep), sol.fallback)


def extragradient_weights(tree_predictions, y, env, K, offsets=None,
                          cfg: SolverConfig = SolverConfig(), normalize: bool = False):
    """Tree weights w on the simplex minimizing the holdout max risk.

    Returns (w, z). The search starts from uniform weights, which also seed
    the best-so-far value. ``normalize`` divides the risks by their largest
    absolute value at the start, so the step size acts on a unit scale; the
    minimizer is unchanged.
    """
    H = np.asarray(tree_predictions, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    y = np.asarray(y, dtype=float)
    env = np.asarray(env)
    n, B = H.shape
    counts = np.bincount(env, minlength=K)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"holdout is missing environment(s) {missing}")
    off = np.zeros(K) if offsets is None else np.asarray(offsets, dtype=float)
    G = np.empty((K, B, B))
    bv = np.empty((K, B))
    s = np.empty(K)
    for e in range(K):
        He, ye = H[env == e], y[env == e]
        G[e] = He.T @ He / len(ye)
        bv[e] = He.T @ ye / len(ye)
        s[e] = ye @ ye / len(ye) - off[e]
    w0 = np.full(B, 1.0 / B)
    if B == 1:
        r = s - 2 * bv[:, 0] + G[:, 0, 0]
        return w0, float(r.max())
    c = 1.0
    if normalize:
        r0 = s - 2 * bv @ w0 + np.einsum("i,eij,j->e", w0, G, w0)
        c = float(np.abs(r0).max()) or 1.0
    w, z, _, _, st = kn.eg_weights_kernel(G / c, bv / c, s / c, w0, cfg.gamma, cfg.t_max,
                                          cfg.delta, cfg.patience)
    if st == kn.STATUS_NONFINITE:
        raise SolverError("non-finite risk in tree-weight optimization")
    return w, float(z) * c
