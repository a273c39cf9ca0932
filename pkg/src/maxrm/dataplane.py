"""Environment-labelled datasets, simulation settings and CSV ingestion.

Random streams are Philox generators keyed by ``SeedSequence(seed, spawn_key=key)``.
Key tuples in use (first element is the tag):

    (1, e)      training covariates/noise of environment e
    (2, e)      test covariates/noise of environment e
    (3,)        per-environment distribution parameters (Beta shift)
    (4, e)      GP function draw of environment e (``(4, 0)`` for the shared draw)
    (10, b)     bootstrap sample of tree b
    (11, b)     m_try feature sampling inside tree b
    (12,)       stratified holdout split for tree reweighting
    (13,)       Monte Carlo covariates for MISE
    (20, r)     repetition r of an experiment (master seed of that repetition)
    (21, k)     per-environment forest k of magging
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

SETTINGS = ("pwl", "gp-noshift", "gp-betashift", "gp-identical", "mixture")

TAG_TRAIN, TAG_TEST, TAG_ENVPARAM, TAG_GP = 1, 2, 3, 4
TAG_BOOT, TAG_MTRY, TAG_HOLDOUT, TAG_MISE = 10, 11, 12, 13
TAG_REP, TAG_MAGGING = 20, 21

PWL_SLOPES = np.array([(-0.5, 4.0), (3.0, 0.5), (2.5, 1.0)])
MIXTURE_SLOPES = np.array([3.0, -3.0, 2.0])


class DataError(ValueError):
    """Invalid or unreadable data."""


class GenerationError(RuntimeError):
    """A simulator could not produce a sample (e.g. Cholesky failure)."""


def rng_for(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class EnvDataset:
    X: np.ndarray
    y: np.ndarray
    env: np.ndarray
    K: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        env = np.asarray(self.env, dtype=np.int64).ravel()
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataError("X must be an n x p matrix with p >= 1")
        if not (len(X) == len(y) == len(env)):
            raise DataError("X, y and env lengths differ")
        if self.K < 1:
            raise DataError("K must be >= 1")
        if len(env) and (env.min() < 0 or env.max() >= self.K):
            raise DataError("environment label outside 0..K-1")
        for a in (X, y, env):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "env", env)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_e(self) -> np.ndarray:
        return np.bincount(self.env, minlength=self.K)

    def subset(self, idx) -> "EnvDataset":
        idx = np.asarray(idx)
        return EnvDataset(self.X[idx], self.y[idx], self.env[idx], self.K)

    def env_rows(self, e: int) -> np.ndarray:
        return np.flatnonzero(self.env == e)


@dataclass(frozen=True)
class OracleFn:
    fn: Callable[[np.ndarray], np.ndarray]
    tag: str

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.fn(X)


@dataclass(frozen=True)
class DgpConfig:
    setting: str = "pwl"
    n_per_env: int = 333
    K: int = 3
    p: int = 1
    noise_sd: float = 0.5
    gp_lengthscale: float = 0.5
    seed: int = 0
    # seed of quantities that stay fixed across repetitions (Beta parameters)
    env_param_seed: int | None = None
    n_test_per_env: int | None = None
    # when set, the training (and test) sample of this total size is divided
    # evenly across environments, the first ones taking the remainder
    n_total: int | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise DataError(f"unknown setting {self.setting!r}; expected one of {', '.join(SETTINGS)}")
        if not self.noise_sd > 0:
            raise DataError("noise_sd must be > 0")
        if not self.gp_lengthscale > 0:
            raise DataError("gp_lengthscale must be > 0")
        if self.n_per_env < 1 or self.K < 1 or self.p < 1:
            raise DataError("n_per_env, K and p must be >= 1")


def default_config(setting: str, **kw) -> DgpConfig:
    """Config with the standard sizes of each simulation setting."""
    base = {
        "pwl": dict(n_per_env=333, K=3, p=1, noise_sd=0.5),
        "mixture": dict(n_per_env=1000, K=3, p=1, noise_sd=1.0),
        "gp-noshift": dict(n_per_env=500, K=5, p=5, noise_sd=0.25),
        "gp-betashift": dict(n_per_env=500, K=5, p=5, noise_sd=0.25),
        "gp-identical": dict(n_per_env=1000, K=5, p=5, noise_sd=0.25),
    }[setting]
    base.update(kw)
    return DgpConfig(setting=setting, **base)


def _stack(parts_X, parts_y, K):
    env = np.concatenate([np.full(len(y), e) for e, y in enumerate(parts_y)])
    return EnvDataset(np.concatenate(parts_X), np.concatenate(parts_y), env, K)


def env_sizes(cfg: DgpConfig, test: bool = False) -> list:
    if cfg.n_total is not None:
        q, r = divmod(cfg.n_total, cfg.K)
        return [q + (e < r) for e in range(cfg.K)]
    n = cfg.n_test_per_env if (test and cfg.n_test_per_env is not None) else cfg.n_per_env
    return [n] * cfg.K


# -- piecewise linear ---------------------------------------------------------

def piecewise_linear(a: float, b: float, tag: str = "", left_closed: bool = True) -> OracleFn:
    """x -> a*x on the negative side, b*x on the positive side."""
    if left_closed:
        fn = lambda X: np.where(X[:, 0] <= 0, a * X[:, 0], b * X[:, 0])
    else:
        fn = lambda X: np.where(X[:, 0] < 0, a * X[:, 0], b * X[:, 0])
    return OracleFn(fn, tag or f"piecewise-linear({a:g},{b:g})")


def _pwl_sample(rng, e, n, sd):
    x = rng.uniform(-4, 4, n)
    a, b = PWL_SLOPES[e]
    y = np.where(x <= 0, a * x, b * x) + sd * rng.standard_normal(n)
    return x[:, None], y


def gen_piecewise_linear(cfg: DgpConfig):
    if cfg.setting != "pwl":
        raise DataError("gen_piecewise_linear needs setting 'pwl'")
    if cfg.K != 3 or cfg.p != 1:
        raise DataError("piecewise-linear setting requires K = 3 and p = 1")
    sets = []
    for tag, sizes in ((TAG_TRAIN, env_sizes(cfg)), (TAG_TEST, env_sizes(cfg, True))):
        Xs, ys = [], []
        for e in range(3):
            x, y = _pwl_sample(rng_for(cfg.seed, tag, e), e, sizes[e], cfg.noise_sd)
            Xs.append(x)
            ys.append(y)
        sets.append(_stack(Xs, ys, 3))
    return (sets[0], sets[1], piecewise_linear(1.25, 2.25, "maxmse-oracle"),
            piecewise_linear(5 / 3, 11 / 6, "pooled-oracle"))


# -- mixture of uniforms ------------------------------------------------------

def _mixture_sample(rng, e, n, sd):
    heavy_pos = e != 1
    side = rng.random(n) < 0.9
    u = rng.uniform(0, 4, n)
    x = np.where(side == heavy_pos, u, -u)
    y = MIXTURE_SLOPES[e] * x + sd * rng.standard_normal(n)
    return x[:, None], y


def gen_mixture_uniform(cfg: DgpConfig, with_test: bool = False):
    if cfg.setting != "mixture":
        raise DataError("gen_mixture_uniform needs setting 'mixture'")
    if cfg.K != 3 or cfg.p != 1:
        raise DataError("mixture setting requires K = 3 and p = 1")
    oracle = OracleFn(lambda X: np.where(X[:, 0] >= 0, 2.4 * X[:, 0], -2.4 * X[:, 0]),
                      "maxmse-oracle")
    sets = []
    for tag, sizes in ((TAG_TRAIN, env_sizes(cfg)), (TAG_TEST, env_sizes(cfg, True))):
        Xs, ys = [], []
        for e in range(3):
            x, y = _mixture_sample(rng_for(cfg.seed, tag, e), e, sizes[e], cfg.noise_sd)
            Xs.append(x)
            ys.append(y)
        sets.append(_stack(Xs, ys, 3))
    if with_test:
        return sets[0], sets[1], oracle
    return sets[0], oracle


# -- Gaussian processes -------------------------------------------------------

def gp_kernel_matrix(points, lengthscale: float) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    sq = np.sum(P * P, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (P @ P.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    Kmat = np.exp(-d2 / (2.0 * lengthscale**2))
    # symmetrize against round-off in the Gram product
    return 0.5 * (Kmat + Kmat.T)


def gp_draw(points, lengthscale, rng, jitter0=1e-10, jitter_max=1e-6) -> np.ndarray:
    """One joint draw of a zero-mean GP with squared-exponential kernel."""
    Kmat = gp_kernel_matrix(points, lengthscale)
    jitter = jitter0
    idx = np.diag_indices_from(Kmat)
    base = Kmat[idx].copy()
    while True:
        Kmat[idx] = base + jitter
        try:
            L = np.linalg.cholesky(Kmat)
            break
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > jitter_max * (1 + 1e-9):
                raise GenerationError(
                    f"Cholesky failed for {len(base)} points even with jitter {jitter_max:g}")
    return L @ rng.standard_normal(len(base))


def beta_params(cfg: DgpConfig) -> np.ndarray:
    """(alpha_e, beta_e) for each environment, fixed by env_param_seed."""
    s = cfg.seed if cfg.env_param_seed is None else cfg.env_param_seed
    return rng_for(s, TAG_ENVPARAM).uniform(0.5, 2.5, size=(cfg.K, 2))


def _beta(rng, a, b, size):
    g1 = rng.standard_gamma(a, size)
    g2 = rng.standard_gamma(b, size)
    return g1 / (g1 + g2)


def gen_gp_envs(cfg: DgpConfig, return_f: bool = False):
    if cfg.setting not in ("gp-noshift", "gp-betashift", "gp-identical"):
        raise DataError("gen_gp_envs needs a gp-* setting")
    K, p = cfg.K, cfg.p
    ntr, nte = env_sizes(cfg), env_sizes(cfg, True)
    ab = beta_params(cfg) if cfg.setting == "gp-betashift" else None
    Xtr, Xte = [], []
    for e in range(K):
        for tag, n, out in ((TAG_TRAIN, ntr[e], Xtr), (TAG_TEST, nte[e], Xte)):
            rng = rng_for(cfg.seed, tag, e)
            if ab is None:
                x = rng.uniform(-1, 1, size=(n, p))
            else:
                x = 2.0 * _beta(rng, ab[e, 0], ab[e, 1], (n, p)) - 1.0
            out.append(x)
    ftr, fte = [None] * K, [None] * K
    if cfg.setting == "gp-identical":
        pts = np.concatenate(Xtr + Xte)
        f = gp_draw(pts, cfg.gp_lengthscale, rng_for(cfg.seed, TAG_GP, 0))
        cuts = np.cumsum(ntr + nte)[:-1]
        parts = np.split(f, cuts)
        ftr, fte = parts[:K], parts[K:]
    else:
        for e in range(K):
            f = gp_draw(np.concatenate([Xtr[e], Xte[e]]), cfg.gp_lengthscale,
                        rng_for(cfg.seed, TAG_GP, e))
            ftr[e], fte[e] = f[:ntr[e]], f[ntr[e]:]
    ytr, yte = [], []
    for e in range(K):
        # noise streams follow the covariates of the same (tag, e) stream family
        ytr.append(ftr[e] + cfg.noise_sd * rng_for(cfg.seed, TAG_TRAIN, e, 1).standard_normal(ntr[e]))
        yte.append(fte[e] + cfg.noise_sd * rng_for(cfg.seed, TAG_TEST, e, 1).standard_normal(nte[e]))
    train, test = _stack(Xtr, ytr, K), _stack(Xte, yte, K)
    if return_f:
        return train, test, np.concatenate(ftr), np.concatenate(fte)
    return train, test


def generate(cfg: DgpConfig):
    """(train, test, oracle or None) for any setting."""
    if cfg.setting == "pwl":
        tr, te, orc, _ = gen_piecewise_linear(cfg)
        return tr, te, orc
    if cfg.setting == "mixture":
        return gen_mixture_uniform(cfg, with_test=True)
    tr, te = gen_gp_envs(cfg)
    return tr, te, None


def sample_covariates(cfg: DgpConfig, m: int, seed: int) -> np.ndarray:
    """m covariates from the equal-weight mixture of the training covariate laws."""
    rng = rng_for(seed, TAG_MISE)
    e = rng.integers(0, cfg.K, m)
    if cfg.setting == "pwl":
        return rng.uniform(-4, 4, (m, 1))
    if cfg.setting == "mixture":
        heavy_pos = e != 1
        side = rng.random(m) < 0.9
        u = rng.uniform(0, 4, m)
        return np.where(side == heavy_pos, u, -u)[:, None]
    if cfg.setting == "gp-betashift":
        ab = beta_params(cfg)
        return 2.0 * _beta(rng, ab[e, 0][:, None], ab[e, 1][:, None], (m, cfg.p)) - 1.0
    return rng.uniform(-1, 1, (m, cfg.p))


# -- bootstrap ----------------------------------------------------------------

def bootstrap_indices(n: int, seed: int, key=(TAG_BOOT, 0)) -> np.ndarray:
    return rng_for(seed, *key).integers(0, n, n)


def bootstrap_sample(ds: EnvDataset, seed: int, key=(TAG_BOOT, 0)) -> EnvDataset:
    """n rows drawn with replacement from the pooled sample; some s_e may be 0."""
    if ds.n < 1:
        raise DataError("cannot bootstrap an empty dataset")
    return ds.subset(bootstrap_indices(ds.n, seed, key))


def stratified_split(ds: EnvDataset, holdout_fraction: float, seed: int):
    """Index arrays (fit, holdout) with every environment split at the same fraction."""
    rng = rng_for(seed, TAG_HOLDOUT)
    fit, hold = [], []
    for e in range(ds.K):
        rows = rng.permutation(ds.env_rows(e))
        m = int(round(holdout_fraction * len(rows)))
        if m == 0 or m == len(rows):
            raise DataError(f"stratified split leaves environment {e} empty")
        hold.append(rows[:m])
        fit.append(rows[m:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(hold))


# -- CSV ----------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    covariates: tuple | None = None   # None means every x<j> column in order
    response: str = "y"
    env: str = "env"


def load_csv(path, schema: CsvSchema | None = None, env_labels: list | None = None):
    """Read an environment-labelled CSV.

    Environment values are mapped to 0..K-1 in order of first appearance, or by
    position in ``env_labels`` when given. Use :func:`load_csv_with_labels` to
    also get the label list.
    """
    return load_csv_with_labels(path, schema, env_labels)[0]


def load_csv_with_labels(path, schema: CsvSchema | None = None, env_labels: list | None = None):
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cov = schema.covariates
        if cov is None:
            cov = tuple(sorted((h for h in header if h[:1] == "x" and h[1:].isdigit()),
                               key=lambda h: int(h[1:])))
            if not cov:
                raise DataError(f"{path}: no covariate columns x1..xp in header")
        for col in (*cov, schema.response, schema.env):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        ci = [header.index(c) for c in cov]
        yi, ei = header.index(schema.response), header.index(schema.env)
        labels = list(env_labels) if env_labels is not None else []
        lookup = {str(v): k for k, v in enumerate(labels)}
        X, y, env = [], [], []
        for r, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
            xs = []
            for j, c in zip(ci, cov):
                xs.append(_num(row[j], path, r, c))
            X.append(xs)
            y.append(_num(row[yi], path, r, schema.response))
            lab = row[ei].strip()
            if lab not in lookup:
                if env_labels is not None:
                    raise DataError(f"{path}: row {r} has unknown environment {lab!r}")
                lookup[lab] = len(labels)
                labels.append(lab)
            env.append(lookup[lab])
    if not y:
        raise DataError(f"{path}: no data rows")
    return EnvDataset(np.array(X), np.array(y), np.array(env), len(labels)), labels


def _num(cell, path, r, col):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {r}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {r}, column {col!r}: non-finite value {cell!r}")
    return v


def write_csv(ds: EnvDataset, path, env_labels=None):
    cols = [f"x{j + 1}" for j in range(ds.p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["y", "env"])
        for i in range(ds.n):
            lab = ds.env[i] if env_labels is None else env_labels[ds.env[i]]
            w.writerow([repr(float(v)) for v in ds.X[i]] + [repr(float(ds.y[i])), lab])
