"""Greedy regression trees, partitions and per-leaf environment statistics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .dataplane import TAG_MTRY, EnvDataset, rng_for
from .minimax.stats import LeafEnvStats

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeHyperparams:
    max_depth: int | None = None
    min_leaf_size: int = 5
    m_try: int | None = None   # None means all p features
    seed: int = 0

    def __post_init__(self):
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if self.m_try is not None and self.m_try < 1:
            raise ValueError("m_try must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def mtry_for(self, p: int) -> int:
        m = p if self.m_try is None else self.m_try
        if m > p:
            raise ValueError(f"m_try = {m} exceeds p = {p}")
        return m


@dataclass
class Tree:
    feature: np.ndarray      # split feature per node, -1 at leaves
    threshold: np.ndarray    # x_j <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    leaf_index: np.ndarray   # node -> leaf id (0..T-1), -1 for internal nodes
    values: np.ndarray       # per-leaf prediction
    stats: LeafEnvStats | None = None
    rf_values: np.ndarray | None = None   # pooled leaf means on the fitting sample
    info: dict = field(default_factory=dict)

    @property
    def n_leaves(self) -> int:
        return len(self.values)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=float).reshape(len(X), -1))
        return _route(X, self.feature, self.threshold, self.left, self.right, self.leaf_index)

    def predict(self, X) -> np.ndarray:
        return self.values[self.apply(X)]

    def with_values(self, values, **info) -> "Tree":
        return replace(self, values=np.asarray(values, dtype=float).copy(),
                       info={**self.info, **info})

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "leaf_index": self.leaf_index.tolist(), "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["leaf_index"], dtype=np.int64), np.array(d["values"], dtype=float))


@dataclass
class Forest:
    trees: list
    weights: np.ndarray | None = None

    def __post_init__(self):
        B = len(self.trees)
        if B < 1:
            raise ValueError("a forest needs at least one tree")
        if self.weights is None:
            self.weights = np.full(B, 1.0 / B)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (B,) or (w < -1e-12).any() or abs(w.sum() - 1) > 1e-9:
            raise ValueError("forest weights must lie on the simplex")
        self.weights = w

    def tree_predictions(self, X) -> np.ndarray:
        return np.stack([t.predict(X) for t in self.trees], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X) @ self.weights

    def to_dict(self) -> dict:
        return {"trees": [t.to_dict() for t in self.trees], "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls([Tree.from_dict(t) for t in d["trees"]], np.array(d["weights"], dtype=float))


def predict_tree(tree: Tree, X) -> np.ndarray:
    return tree.predict(X)


def predict_forest(forest: Forest, X) -> np.ndarray:
    return forest.predict(X)


@njit(cache=True)
def _route(X, feature, threshold, left, right, leaf_index):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf_index[node]
    return out


@njit(cache=True)
def midpoint(lo, hi):
    m = 0.5 * (lo + hi)
    if m >= hi:
        m = lo
    return m


@njit(cache=True)
def best_sse_split(X, y, idx, feats, min_leaf):
    """Best pooled-SSE split of the rows idx over the given (sorted) features.

    Returns (feature, threshold, gain); feature = -1 when no admissible split.
    Ties keep the first candidate, i.e. lowest feature then lowest threshold.
    """
    n = idx.shape[0]
    tot = 0.0
    for i in range(n):
        tot += y[idx[i]]
    best_f = -1
    best_thr = 0.0
    best_gain = -np.inf
    if n < 2 * min_leaf:
        return best_f, best_thr, best_gain
    base = tot * tot / n
    xs = np.empty(n)
    ys = np.empty(n)
    for f in feats:
        for i in range(n):
            xs[i] = X[idx[i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[order[i]]]
        sl = 0.0
        for i in range(n - 1):
            sl += ys[i]
            nl = i + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            a = xs[order[i]]
            b = xs[order[i + 1]]
            if not a < b:
                continue
            sr = tot - sl
            gain = sl * sl / nl + sr * sr / (n - nl) - base
            if best_f < 0 or gain > best_gain + 1e-12 * abs(best_gain):
                best_gain = gain
                best_f = f
                best_thr = midpoint(a, b)
    return best_f, best_thr, best_gain


class TreeBuilder:
    """Node arrays grown incrementally; leaves are numbered when finalized."""

    def __init__(self):
        self.feature, self.threshold, self.left, self.right = [-1], [0.0], [-1], [-1]

    def split(self, node, f, thr):
        lc = len(self.feature)
        for _ in range(2):
            self.feature.append(-1)
            self.threshold.append(0.0)
            self.left.append(-1)
            self.right.append(-1)
        self.feature[node], self.threshold[node] = int(f), float(thr)
        self.left[node], self.right[node] = lc, lc + 1
        return lc, lc + 1

    def finalize(self, node_rows: dict, ds: EnvDataset, values_by_node: dict | None = None) -> Tree:
        feature = np.array(self.feature, dtype=np.int64)
        leaf_index = np.full(len(feature), -1, dtype=np.int64)
        leaves = np.flatnonzero(feature < 0)
        leaf_index[leaves] = np.arange(len(leaves))
        leaf_of_row = np.empty(ds.n, dtype=np.int64)
        for node in leaves:
            leaf_of_row[node_rows[node]] = leaf_index[node]
        stats = LeafEnvStats.from_assignment(leaf_of_row, ds.y, ds.env, ds.K, len(leaves))
        rf = stats.pooled_means()
        if values_by_node is None:
            values = rf.copy()
        else:
            values = np.array([values_by_node[node] for node in leaves], dtype=float)
        return Tree(feature, np.array(self.threshold), np.array(self.left, dtype=np.int64),
                    np.array(self.right, dtype=np.int64), leaf_index, values, stats, rf)


def sample_features(rng, p: int, m: int) -> np.ndarray:
    if m >= p:
        return np.arange(p, dtype=np.int64)
    return np.sort(rng.choice(p, m, replace=False)).astype(np.int64)


def split_tolerance(y_node) -> float:
    # gains at round-off level are not real improvements
    return 1e-10 * (1.0 + float(np.sum((y_node - y_node.mean()) ** 2)))


def fit_cart_tree(ds: EnvDataset, hp: TreeHyperparams, rng=None) -> Tree:
    """Depth-first greedy CART on pooled squared error."""
    rng = rng if rng is not None else rng_for(hp.seed, TAG_MTRY, 0)
    m = hp.mtry_for(ds.p)
    X = np.ascontiguousarray(ds.X)
    y = np.ascontiguousarray(ds.y)
    b = TreeBuilder()
    rows = {}
    stack = [(0, np.arange(ds.n, dtype=np.int64), 0)]
    while stack:
        node, idx, depth = stack.pop()
        rows[node] = idx
        if (hp.max_depth is not None and depth >= hp.max_depth) or len(idx) < 2 * hp.min_leaf_size:
            continue
        feats = sample_features(rng, ds.p, m)
        f, thr, gain = best_sse_split(X, y, idx, feats, hp.min_leaf_size)
        if f < 0 or gain <= split_tolerance(y[idx]):
            continue
        lc, rc = b.split(node, f, thr)
        go_left = X[idx, f] <= thr
        del rows[node]
        stack.append((rc, idx[~go_left], depth + 1))
        stack.append((lc, idx[go_left], depth + 1))
    return b.finalize(rows, ds)


@dataclass
class LeafAssignment:
    """Leaf id of every row, split by environment (a compact form of A_e)."""
    leaf: np.ndarray
    env: np.ndarray
    T: int
    K: int

    def matrix(self, e: int) -> np.ndarray:
        rows = self.leaf[self.env == e]
        A = np.zeros((len(rows), self.T))
        A[np.arange(len(rows)), rows] = 1.0
        return A


def leaf_assignment(tree: Tree, ds: EnvDataset) -> LeafAssignment:
    return LeafAssignment(tree.apply(ds.X), ds.env.copy(), tree.n_leaves, ds.K)


def restat(tree: Tree, ds: EnvDataset) -> LeafEnvStats:
    """Leaf statistics of ``ds`` routed through ``tree``."""
    return LeafEnvStats.from_assignment(tree.apply(ds.X), ds.y, ds.env, ds.K, tree.n_leaves)
