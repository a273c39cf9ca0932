from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LeafEnvStats:
    """Per (environment, leaf) count, mean and sum of squared deviations.

    Arrays are K x T. ``n_e`` holds the per-environment totals, which may be 0
    for environments absent from a bootstrap sample.
    """
    count: np.ndarray
    mean: np.ndarray
    ssd: np.ndarray
    n_e: np.ndarray

    @classmethod
    def from_assignment(cls, leaf, y, env, K: int, T: int) -> "LeafEnvStats":
        leaf = np.asarray(leaf, dtype=np.int64)
        env = np.asarray(env, dtype=np.int64)
        y = np.asarray(y, dtype=float)
        flat = env * T + leaf
        cnt = np.bincount(flat, minlength=K * T).astype(float).reshape(K, T)
        s = np.bincount(flat, weights=y, minlength=K * T).reshape(K, T)
        mean = np.divide(s, cnt, out=np.zeros_like(s), where=cnt > 0)
        # deviations from the cell mean, accumulated directly for accuracy
        dev = y - mean.ravel()[flat]
        ssd = np.bincount(flat, weights=dev * dev, minlength=K * T).reshape(K, T)
        return cls(cnt, mean, ssd, cnt.sum(axis=1))

    @property
    def K(self) -> int:
        return self.count.shape[0]

    @property
    def T(self) -> int:
        return self.count.shape[1]

    def inv_n(self) -> np.ndarray:
        """1/(n_e v 1)."""
        return 1.0 / np.maximum(self.n_e, 1.0)

    def nonempty(self) -> np.ndarray:
        return self.n_e > 0

    def pooled_means(self, fallback=None) -> np.ndarray:
        tot = self.count.sum(axis=0)
        s = (self.count * self.mean).sum(axis=0)
        out = np.zeros(self.T) if fallback is None else np.array(fallback, dtype=float)
        np.divide(s, tot, out=out, where=tot > 0)
        return out

    def risks(self, theta, offsets=None) -> np.ndarray:
        """R_e(theta) = (1/(n_e v 1)) sum_t [SSD + n (mu - theta)^2] - c_e."""
        theta = np.asarray(theta, dtype=float)
        sq = self.ssd + self.count * (self.mean - theta[None, :]) ** 2
        r = sq.sum(axis=1) * self.inv_n()
        if offsets is not None:
            r = r - np.asarray(offsets, dtype=float)
        return r

    def restrict(self, envs) -> "LeafEnvStats":
        envs = np.asarray(envs)
        return LeafEnvStats(self.count[envs], self.mean[envs], self.ssd[envs], self.n_e[envs])
