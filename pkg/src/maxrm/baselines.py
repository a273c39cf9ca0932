"""Reference estimators: standard RF, magging, and closed-form oracle risks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cart import TreeHyperparams
from .dataplane import TAG_MAGGING, DataError, EnvDataset, rng_for
from .minimax import PRECISE, SolverConfig, extragradient_weights
from .risk import RiskSpec
from .strategies import MaxRmForest, StrategySpec, fit_maxrm_forest


def fit_rf(ds: EnvDataset, hp: TreeHyperparams = TreeHyperparams(), B: int = 100, seed: int = 0,
           workers: int = 1) -> MaxRmForest:
    """Bagged CART trees with pooled leaf means and uniform weights."""
    return fit_maxrm_forest(ds, StrategySpec("rf"), RiskSpec.mse(ds.K), SolverConfig(), hp, B,
                            seed, workers)


@dataclass
class MaggingModel:
    forests: list
    q: np.ndarray
    risk: RiskSpec
    z: float

    def predict(self, X) -> np.ndarray:
        P = np.stack([f.predict(X) for f in self.forests], axis=1)
        return P @ self.q

    def env_predictions(self, X) -> np.ndarray:
        return np.stack([f.predict(X) for f in self.forests], axis=1)


def fit_magging(ds: EnvDataset, spec: RiskSpec, hp: TreeHyperparams = TreeHyperparams(),
                B: int = 100, seed: int = 0, solver: SolverConfig = PRECISE,
                workers: int = 1) -> MaggingModel:
    """One RF per environment, mixed by simplex weights minimizing the in-sample max risk."""
    forests = []
    for k in range(ds.K):
        rows = ds.env_rows(k)
        if len(rows) < max(hp.min_leaf_size, 1):
            raise DataError(f"environment {k} has {len(rows)} rows; too few for a forest")
        sub = ds.subset(rows)
        sub = EnvDataset(sub.X, sub.y, np.zeros(sub.n, dtype=np.int64), 1)
        sk = int(rng_for(seed, TAG_MAGGING, k).integers(0, 2**63 - 1))
        forests.append(fit_rf(sub, hp, B, sk, workers))
    if ds.K == 1:
        return MaggingModel(forests, np.ones(1), spec, float("nan"))
    P = np.stack([f.predict(ds.X) for f in forests], axis=1)
    q, z = extragradient_weights(P, ds.y, ds.env, ds.K, spec.offsets, solver, normalize=True)
    return MaggingModel(forests, q, spec, z)


# closed-form population risks of piecewise-linear predictors

def oracle_analytic_risks(slopes, setting: str = "pwl", noise_sd: float | None = None):
    """Per-environment population MSE of x -> a x 1{x<=0} + b x 1{x>0} and its max.

    For 'pwl' the environments have X ~ U[-4, 4]; for 'mixture' the two-sided
    uniform mixtures with weight 0.9 on the heavy side. In the mixture setting
    the first slope acts on x >= 0 (c+) and the second on x < 0 (c-).
    """
    a, b = (float(s) for s in slopes)
    if setting == "pwl":
        sd = 0.5 if noise_sd is None else noise_sd
        ab = np.array([(-0.5, 4.0), (3.0, 0.5), (2.5, 1.0)])
        # E[x^2; x <= 0] = E[x^2; x > 0] = 16/3 * 1/2 = 8/3 under U[-4, 4]
        r = 8.0 / 3.0 * ((ab[:, 0] - a) ** 2 + (ab[:, 1] - b) ** 2) + sd**2
    elif setting == "mixture":
        sd = 1.0 if noise_sd is None else noise_sd
        cp, cm = a, b
        c = np.array([3.0, -3.0, 2.0])
        # heavy side carries 0.9 * E[u^2] = 0.9 * 16/3 = 24/5, light side 0.1 * 16/3 = 8/15
        heavy, light = 24.0 / 5.0, 8.0 / 15.0
        pos = np.array([heavy, light, heavy])
        neg = np.array([light, heavy, light])
        r = pos * (c - cp) ** 2 + neg * (c - cm) ** 2 + sd**2
    else:
        raise ValueError(f"no closed-form risks for setting {setting!r}")
    return r, float(r.max())
