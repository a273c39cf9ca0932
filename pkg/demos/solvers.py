"""
The leaf-value problem min_theta max_e R_e(theta) on small hand-made inputs:
extragradient at its default and at a long small-step setting, block
coordinate descent, and the two-leaf KKT enumeration used during local growth.

Run from the repository root:  python demos/solvers.py
"""

import numpy as np

from maxrm.minimax import (PRECISE, LeafEnvStats, SolverConfig, bcd_posthoc,
                           extragradient_posthoc, kkt_local_solve, weighted_leaf_means)

## One leaf, two environments
# env 0 has y = {0, 2}, env 1 has y = {10}; the worst case balances the two
st = LeafEnvStats.from_assignment(np.zeros(3, dtype=int), np.array([0.0, 2.0, 10.0]),
                                  np.array([0, 0, 1]), 2, 1)
for name, cfg in (("default", SolverConfig()), ("precise", PRECISE)):
    r = extragradient_posthoc(None, st, cfg=cfg)
    print(f"EG {name:8s} theta {r.theta[0]:.4f}  z {r.z:.4f}  p {np.round(r.p, 3)}"
          f"  iterations {r.iterations}")
print("exact: theta = 49/9 =", round(49 / 9, 4), " z = 1681/81 =", round(1681 / 81, 4))

## Many leaves
rng = np.random.default_rng(0)
T, K = 40, 3
leaf = rng.integers(0, T, 600)
env = rng.integers(0, K, 600)
y = rng.normal(size=600) + np.array([-2.0, 0.0, 3.0])[env] * (leaf % 2)
st = LeafEnvStats.from_assignment(leaf, y, env, K, T)
z_rf = st.risks(st.pooled_means()).max()
print(f"\n{T} leaves: pooled means give max risk {z_rf:.4f}")
for name, f, cfg in (("EG default", extragradient_posthoc, SolverConfig()),
                     ("EG precise", extragradient_posthoc, PRECISE),
                     ("BCD default", bcd_posthoc, SolverConfig.bcd())):
    r = f(None, st, cfg=cfg)
    print(f"{name:12s} z {r.z:.4f}  active environments {r.active.tolist()}")

## Dual view
# any p on the simplex gives a lower bound through the p-weighted leaf means
p = extragradient_posthoc(None, st, cfg=PRECISE).p
lb = p @ st.risks(weighted_leaf_means(p, st, theta_in=np.zeros(T)))
print(f"lower bound at the solver's p: {lb:.4f}")

## Two sibling leaves with everything else frozen
# (count, mean, within-leaf squared deviation) per environment for each child
left = ([4, 4], [0.0, 3.0], [1.0, 1.0])
right = ([4, 4], [2.0, -1.0], [1.0, 1.0])
sol = kkt_local_solve(left, right, frozen=[0.0, 0.0])
print(f"\nKKT: left {sol.theta_left:.4f}, right {sol.theta_right:.4f}, z {sol.z:.4f},"
      f" fallback {sol.fallback}")
