"""Risk kinds (MSE, negative reward, regret), offsets and empirical risks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cart import TreeHyperparams, fit_cart_tree
from .dataplane import TAG_MTRY, DataError, EnvDataset, rng_for
from .minimax.stats import LeafEnvStats

KINDS = ("mse", "nrw", "reg")
TIE_TOL = 1e-9


@dataclass(frozen=True)
class RiskSpec:
    kind: str
    offsets: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown risk kind {self.kind!r}; expected mse|nrw|reg")
        off = np.asarray(self.offsets, dtype=float).ravel()
        if self.kind == "mse" and np.any(off != 0):
            raise ValueError("MSE offsets must be zero")
        object.__setattr__(self, "offsets", off)

    @property
    def K(self) -> int:
        return len(self.offsets)

    @classmethod
    def mse(cls, K: int) -> "RiskSpec":
        return cls("mse", np.zeros(K))


@dataclass
class RiskValue:
    risks: np.ndarray
    z: float
    argmax: np.ndarray
    included: np.ndarray


def risk_offsets(ds: EnvDataset, kind: str, hp: TreeHyperparams | None = None) -> np.ndarray:
    if kind not in KINDS:
        raise ValueError(f"unknown risk kind {kind!r}; expected mse|nrw|reg")
    c = np.zeros(ds.K)
    if kind == "mse":
        return c
    for e in range(ds.K):
        rows = ds.env_rows(e)
        ye = ds.y[rows]
        if kind == "nrw":
            if len(rows) == 0:
                raise DataError(f"environment {e} is empty")
            c[e] = ye @ ye / len(ye)
        else:
            hp = hp or TreeHyperparams()
            if len(rows) < max(hp.min_leaf_size, 2):
                raise DataError(
                    f"environment {e} has {len(rows)} rows, too few to fit a regret tree "
                    f"(min_leaf_size = {hp.min_leaf_size})")
            sub = ds.subset(rows)
            tree = fit_cart_tree(sub, hp, rng=rng_for(hp.seed, TAG_MTRY, 1_000_000 + e))
            r = ye - tree.predict(sub.X)
            c[e] = r @ r / len(ye)
    return c


def make_risk(ds: EnvDataset, kind: str, hp: TreeHyperparams | None = None) -> RiskSpec:
    return RiskSpec(kind, risk_offsets(ds, kind, hp))


def empirical_env_risk(theta, A_e, y_e, c_e: float = 0.0, n_e_effective=None) -> float:
    """(1/(n_e v 1)) ||A_e theta - y_e||^2 - c_e."""
    y_e = np.asarray(y_e, dtype=float)
    n = len(y_e) if n_e_effective is None else n_e_effective
    if len(y_e) == 0:
        return float(-c_e)
    A_e = np.asarray(A_e, dtype=float).reshape(len(y_e), -1)
    r = A_e @ np.asarray(theta, dtype=float) - y_e
    return float(r @ r / max(n, 1) - c_e)


def max_empirical_risk(theta, stats: LeafEnvStats, spec: RiskSpec | None = None) -> RiskValue:
    """Per-environment risks, their max over nonempty environments and the tie set."""
    off = None if spec is None else spec.offsets
    r = stats.risks(theta, off)
    inc = stats.nonempty()
    return _risk_value(r, inc)


def _risk_value(r, inc) -> RiskValue:
    if not inc.any():
        raise DataError("all environments are empty")
    z = float(r[inc].max())
    arg = np.flatnonzero(inc & (r >= z - TIE_TOL * max(1.0, abs(z))))
    return RiskValue(r, z, arg, inc)


def prediction_risks(pred, y, env, K: int, offsets=None) -> RiskValue:
    """Empirical risks of arbitrary predictions, environment by environment."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    env = np.asarray(env)
    n_e = np.bincount(env, minlength=K)
    sq = np.bincount(env, weights=(y - pred) ** 2, minlength=K)
    r = sq / np.maximum(n_e, 1)
    if offsets is not None:
        r = r - np.asarray(offsets, dtype=float)
    return _risk_value(r, n_e > 0)


def mixture_risk(q, risks) -> float:
    return float(np.dot(q, risks))
