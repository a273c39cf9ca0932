"""
Magging mixes environment-specific forests with simplex weights. When the
environments place their covariates on different halves of the line, no such
mixture can reach the max-risk optimum; this script shows the gap on the
two-sided uniform mixture setting.

Run from the repository root:  python demos/magging_counterexample.py
"""

import numpy as np

from maxrm import (RiskSpec, SolverConfig, StrategySpec, TreeHyperparams, default_config,
                   fit_magging, fit_maxrm_forest, generate, oracle_analytic_risks)
from maxrm.evalharness import evaluate

## Closed-form worst-case risks
# slopes (c+, c-) of the predictor on x >= 0 and x < 0
for slopes in [(2.4, -2.4), (0.0, 0.0), (3.0, -3.0)]:
    r, z = oracle_analytic_risks(slopes, "mixture")
    print(f"slopes {slopes}: env risks {np.round(r, 2)}, max {z:.2f}")

## Simulated data
# 3000 rows per environment keeps this under a minute; the gap only widens with n
train, test, oracle = generate(default_config("mixture", n_per_env=3000, seed=3))
hp = TreeHyperparams(min_leaf_size=30)
spec = RiskSpec.mse(train.K)

mag = fit_magging(train, spec, hp, B=30, seed=3)
post = fit_maxrm_forest(train, StrategySpec("posthoc"), spec, SolverConfig(), hp, B=30, seed=3)
rf = fit_maxrm_forest(train, StrategySpec("rf"), spec, SolverConfig(), hp, B=30, seed=3)

print("magging weights", np.round(mag.q, 3))
for name, m in (("rf", rf), ("magging", mag), ("posthoc", post)):
    print(f"{name:8s} max test MSE {evaluate(m, test).max_risk['mse']:6.2f}")

## Why magging fails here
# each environment's forest is only accurate on its heavy side, and the weights
# cannot be chosen separately for x >= 0 and x < 0
xs = np.array([[-3.0], [-1.0], [1.0], [3.0]])
print("env forests at x = -3, -1, 1, 3:")
print(np.round(mag.env_predictions(xs).T, 2))
print("oracle:", np.round(oracle(xs), 2))
