"""Compiled inner loops shared by the solvers and the tree growers.

Risks are always evaluated from leaf statistics:

    R_e(theta) = base_e + inv_n_e * sum_t cnt[e, t] * (mu[e, t] - theta_t)^2

where ``base_e`` collects everything that does not depend on the optimized
values (within-leaf deviations, frozen leaves, minus the risk offset).
"""
import numpy as np
from numba import njit

STATUS_PATIENCE = 0
STATUS_TMAX = 1
STATUS_NONFINITE = 2
STATUS_FALLBACK = 3


@njit(cache=True)
def proj_simplex(v):
    """Euclidean projection onto the probability simplex (sort based)."""
    K = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    tau = 0.0
    for k in range(K):
        css += u[k]
        t = (css - 1.0) / (k + 1)
        if u[k] - t > 0:
            tau = t
    out = np.empty(K)
    for k in range(K):
        out[k] = max(v[k] - tau, 0.0)
    return out


@njit(cache=True)
def env_risks(cnt, mu, base, inv_n, theta, out):
    K, T = cnt.shape
    for e in range(K):
        s = 0.0
        for t in range(T):
            c = cnt[e, t]
            if c != 0.0:
                d = mu[e, t] - theta[t]
                s += c * d * d
        out[e] = base[e] + inv_n[e] * s


@njit(cache=True)
def _mixed_grad(cnt, mu, inv_n, theta, p, out):
    # out_t = sum_e p_e * 2 inv_n_e cnt_et (theta_t - mu_et)
    K, T = cnt.shape
    for t in range(T):
        out[t] = 0.0
    for e in range(K):
        w = 2.0 * p[e] * inv_n[e]
        if w == 0.0:
            continue
        for t in range(T):
            c = cnt[e, t]
            if c != 0.0:
                out[t] += w * c * (theta[t] - mu[e, t])


@njit(cache=True)
def eg_kernel(cnt, mu, base, inv_n, theta0, gamma, tmax, delta, patience):
    """Projected extragradient on min_theta max_{p in simplex} sum_e p_e R_e(theta).

    Returns (theta_best, z_best, p, iterations, status).
    """
    K, T = cnt.shape
    th = theta0.copy()
    p = np.full(K, 1.0 / K)
    best = th.copy()
    lbest = np.inf
    R = np.empty(K)
    R2 = np.empty(K)
    g = np.empty(T)
    th_half = np.empty(T)
    no_imp = 0
    status = STATUS_TMAX
    it = 0
    for j in range(tmax):
        it = j + 1
        env_risks(cnt, mu, base, inv_n, th, R)
        _mixed_grad(cnt, mu, inv_n, th, p, g)
        for t in range(T):
            th_half[t] = th[t] - gamma * g[t]
        p_half = proj_simplex(p + gamma * R)
        env_risks(cnt, mu, base, inv_n, th_half, R2)
        _mixed_grad(cnt, mu, inv_n, th_half, p_half, g)
        for t in range(T):
            th[t] = th[t] - gamma * g[t]
        # the full-step p update starts from p^(j), as written in the algorithm
        p = proj_simplex(p + gamma * R2)
        env_risks(cnt, mu, base, inv_n, th, R)
        l = R.max()
        if not np.isfinite(l):
            status = STATUS_NONFINITE
            break
        if l < lbest - delta:
            lbest = l
            best[:] = th
            no_imp = 0
        else:
            no_imp += 1
        if no_imp >= patience:
            status = STATUS_PATIENCE
            break
    if lbest == np.inf:
        env_risks(cnt, mu, base, inv_n, best, R)
        lbest = R.max()
    return best, lbest, p, it, status


@njit(cache=True)
def bcd_kernel(cnt, mu, base, inv_n, theta0, gamma, tmax, delta, patience,
               block, inner_tmax, inner_patience):
    """Cyclic block-coordinate descent; each block solved by extragradient."""
    K, T = cnt.shape
    nb = (T + block - 1) // block
    th = theta0.copy()
    best = th.copy()
    zbest = np.inf
    p_last = np.full(K, 1.0 / K)
    no_imp = 0
    status = STATUS_TMAX
    it = 0
    for j in range(tmax):
        it = j + 1
        b = j % nb
        lo = b * block
        hi = min(T, lo + block)
        # frozen contribution of all leaves outside the block
        sub_base = np.empty(K)
        for e in range(K):
            s = 0.0
            for t in range(T):
                if t >= lo and t < hi:
                    continue
                c = cnt[e, t]
                if c != 0.0:
                    d = mu[e, t] - th[t]
                    s += c * d * d
            sub_base[e] = base[e] + inv_n[e] * s
        sub_th, z, p_last, _, st = eg_kernel(
            np.ascontiguousarray(cnt[:, lo:hi]), np.ascontiguousarray(mu[:, lo:hi]),
            sub_base, inv_n, th[lo:hi].copy(), gamma, inner_tmax, delta, inner_patience)
        if st == STATUS_NONFINITE or not np.isfinite(z):
            status = STATUS_NONFINITE
            break
        th[lo:hi] = sub_th
        if abs(z - zbest) < delta:
            no_imp += 1
        else:
            no_imp = 0
        if z < zbest:
            zbest = z
            best[:] = th
        if no_imp >= patience:
            status = STATUS_PATIENCE
            break
    if zbest == np.inf:
        R = np.empty(K)
        env_risks(cnt, mu, base, inv_n, best, R)
        zbest = R.max()
    return best, zbest, p_last, it, status


@njit(cache=True)
def weighted_means_kernel(cnt, mu, inv_n, p, theta_in):
    K, T = cnt.shape
    out = theta_in.copy()
    indet = np.zeros(T, dtype=np.bool_)
    for t in range(T):
        num = 0.0
        den = 0.0
        for e in range(K):
            w = p[e] * cnt[e, t] * inv_n[e]
            num += w * mu[e, t]
            den += w
        if den > 0.0:
            out[t] = num / den
        else:
            indet[t] = True
    return out, indet


# -- two-leaf KKT enumeration ------------------------------------------------

@njit(cache=True)
def _risk2(e, a, b, F, wL, mL, wR, mR):
    da = mL[e] - a
    db = mR[e] - b
    return F[e] + wL[e] * da * da + wR[e] * db * db


@njit(cache=True)
def _max_risk2(a, b, F, wL, mL, wR, mR):
    z = -np.inf
    for e in range(F.shape[0]):
        r = _risk2(e, a, b, F, wL, mL, wR, mR)
        if r > z:
            z = r
    return z


@njit(cache=True)
def _pair_point(lam, i, j, wL, mL, wR, mR, a0, b0):
    dl = lam * wL[i] + (1 - lam) * wL[j]
    dr = lam * wR[i] + (1 - lam) * wR[j]
    a = a0
    b = b0
    if dl > 0:
        a = (lam * wL[i] * mL[i] + (1 - lam) * wL[j] * mL[j]) / dl
    if dr > 0:
        b = (lam * wR[i] * mR[i] + (1 - lam) * wR[j] * mR[j]) / dr
    return a, b


@njit(cache=True)
def _fill_free(a, b, free_a, free_b, F, wL, mL, wR, mR):
    """Set leaf values the active set leaves undetermined.

    A free value only enters the inactive risks, so it is placed where the
    max risk in that single coordinate is smallest (golden section on a
    convex function, bracketed by the leaf means).
    """
    g = 0.5 * (np.sqrt(5.0) - 1.0)
    for side in range(2):
        if (side == 0 and not free_a) or (side == 1 and not free_b):
            continue
        w = wL if side == 0 else wR
        m = mL if side == 0 else mR
        lo = np.inf
        hi = -np.inf
        for e in range(F.shape[0]):
            if w[e] > 0:
                lo = min(lo, m[e])
                hi = max(hi, m[e])
        if lo > hi:
            continue
        x1 = hi - g * (hi - lo)
        x2 = lo + g * (hi - lo)
        for _ in range(120):
            if side == 0:
                f1 = _max_risk2(x1, b, F, wL, mL, wR, mR)
                f2 = _max_risk2(x2, b, F, wL, mL, wR, mR)
            else:
                f1 = _max_risk2(a, x1, F, wL, mL, wR, mR)
                f2 = _max_risk2(a, x2, F, wL, mL, wR, mR)
            if f1 <= f2:
                hi = x2
            else:
                lo = x1
            x1 = hi - g * (hi - lo)
            x2 = lo + g * (hi - lo)
        if side == 0:
            a = 0.5 * (lo + hi)
        else:
            b = 0.5 * (lo + hi)
    return a, b


@njit(cache=True)
def _feasible(z, a, b, F, wL, mL, wR, mR):
    tol = 1e-9 * max(1.0, abs(z))
    for e in range(F.shape[0]):
        if _risk2(e, a, b, F, wL, mL, wR, mR) > z + tol:
            return False
    return True


@njit(cache=True)
def _solve3(A, rhs):
    # Gaussian elimination with partial pivoting; returns (x, ok)
    M = A.copy()
    r = rhs.copy()
    n = 3
    for c in range(n):
        piv = c
        for k in range(c + 1, n):
            if abs(M[k, c]) > abs(M[piv, c]):
                piv = k
        if abs(M[piv, c]) < 1e-14:
            return r, False
        if piv != c:
            for k in range(n):
                tmp = M[c, k]
                M[c, k] = M[piv, k]
                M[piv, k] = tmp
            tmp = r[c]
            r[c] = r[piv]
            r[piv] = tmp
        for k in range(c + 1, n):
            f = M[k, c] / M[c, c]
            for m in range(c, n):
                M[k, m] -= f * M[c, m]
            r[k] -= f * r[c]
    x = np.zeros(n)
    for c in range(n - 1, -1, -1):
        s = r[c]
        for m in range(c + 1, n):
            s -= M[c, m] * x[m]
        x[c] = s / M[c, c]
    return x, True


@njit(cache=True)
def _newton3(i, j, k, a, b, F, wL, mL, wR, mR):
    """Damped Newton on R_i = R_j = R_k in (a, b)."""
    for _ in range(60):
        ri = _risk2(i, a, b, F, wL, mL, wR, mR)
        g1 = ri - _risk2(j, a, b, F, wL, mL, wR, mR)
        g2 = ri - _risk2(k, a, b, F, wL, mL, wR, mR)
        nrm = g1 * g1 + g2 * g2
        scale = 1.0 + abs(ri)
        if abs(g1) < 1e-11 * scale and abs(g2) < 1e-11 * scale:
            return a, b, True
        # d/da R_e = 2 wL_e (a - mL_e)
        gai = 2 * wL[i] * (a - mL[i])
        gbi = 2 * wR[i] * (b - mR[i])
        J11 = gai - 2 * wL[j] * (a - mL[j])
        J12 = gbi - 2 * wR[j] * (b - mR[j])
        J21 = gai - 2 * wL[k] * (a - mL[k])
        J22 = gbi - 2 * wR[k] * (b - mR[k])
        det = J11 * J22 - J12 * J21
        if abs(det) < 1e-300:
            return a, b, False
        da = -(J22 * g1 - J12 * g2) / det
        db = -(-J21 * g1 + J11 * g2) / det
        step = 1.0
        moved = False
        for _ in range(30):
            na = a + step * da
            nb = b + step * db
            ri = _risk2(i, na, nb, F, wL, mL, wR, mR)
            h1 = ri - _risk2(j, na, nb, F, wL, mL, wR, mR)
            h2 = ri - _risk2(k, na, nb, F, wL, mL, wR, mR)
            if h1 * h1 + h2 * h2 < nrm:
                a = na
                b = nb
                moved = True
                break
            step *= 0.5
        if not moved:
            return a, b, False
    ri = _risk2(i, a, b, F, wL, mL, wR, mR)
    g1 = ri - _risk2(j, a, b, F, wL, mL, wR, mR)
    g2 = ri - _risk2(k, a, b, F, wL, mL, wR, mR)
    scale = 1.0 + abs(ri)
    return a, b, abs(g1) < 1e-8 * scale and abs(g2) < 1e-8 * scale


@njit(cache=True)
def kkt2_kernel(F, wL, mL, wR, mR, a0, b0, gamma, tmax, delta, patience):
    """Minimize max_e R_e(a, b) for two free leaf values.

    R_e(a, b) = F_e + wL_e (mL_e - a)^2 + wR_e (mR_e - b)^2 with wL = nL/n_e.
    Active sets of size <= 3 are enumerated (Caratheodory in two dimensions).
    A value whose leaf holds no observation of the active environments is set to
    minimize the max risk in that coordinate. Returns (a, b, z, status) where
    status 3 flags the EG fallback.
    """
    K = F.shape[0]
    best_a = a0
    best_b = b0
    best_z = np.inf
    found = False
    # |S| = 1
    for k in range(K):
        a = mL[k] if wL[k] > 0 else a0
        b = mR[k] if wR[k] > 0 else b0
        a, b = _fill_free(a, b, wL[k] == 0, wR[k] == 0, F, wL, mL, wR, mR)
        z = _risk2(k, a, b, F, wL, mL, wR, mR)
        if z < best_z and _feasible(z, a, b, F, wL, mL, wR, mR):
            best_a, best_b, best_z, found = a, b, z, True
    # |S| = 2: bisection on the weight of environment i
    pa = np.empty(K * K)
    pb = np.empty(K * K)
    pok = np.zeros(K * K, dtype=np.bool_)
    for i in range(K):
        for j in range(i + 1, K):
            lo = 1e-15
            hi = 1.0 - 1e-15
            a, b = _pair_point(lo, i, j, wL, mL, wR, mR, a0, b0)
            hlo = _risk2(i, a, b, F, wL, mL, wR, mR) - _risk2(j, a, b, F, wL, mL, wR, mR)
            a, b = _pair_point(hi, i, j, wL, mL, wR, mR, a0, b0)
            hhi = _risk2(i, a, b, F, wL, mL, wR, mR) - _risk2(j, a, b, F, wL, mL, wR, mR)
            if hlo * hhi > 0 or (hlo == 0 and hhi == 0):
                continue
            # h decreases in lambda: more weight on i lowers R_i and raises R_j
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                a, b = _pair_point(mid, i, j, wL, mL, wR, mR, a0, b0)
                h = _risk2(i, a, b, F, wL, mL, wR, mR) - _risk2(j, a, b, F, wL, mL, wR, mR)
                if (h > 0) == (hlo > 0):
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-16:
                    break
            a, b = _pair_point(0.5 * (lo + hi), i, j, wL, mL, wR, mR, a0, b0)
            a, b = _fill_free(a, b, wL[i] + wL[j] == 0, wR[i] + wR[j] == 0,
                              F, wL, mL, wR, mR)
            pa[i * K + j] = a
            pb[i * K + j] = b
            pok[i * K + j] = True
            z = max(_risk2(i, a, b, F, wL, mL, wR, mR), _risk2(j, a, b, F, wL, mL, wR, mR))
            if z < best_z and _feasible(z, a, b, F, wL, mL, wR, mR):
                best_a, best_b, best_z, found = a, b, z, True
    # |S| = 3: Newton from several starts, multipliers from the stationarity system
    starts_a = np.empty(8)
    starts_b = np.empty(8)
    A = np.empty((3, 3))
    rhs = np.array([0.0, 0.0, 1.0])
    for i in range(K):
        for j in range(i + 1, K):
            for k in range(j + 1, K):
                ns = 0
                for (u, v) in ((i, j), (i, k), (j, k)):
                    if pok[u * K + v]:
                        starts_a[ns] = pa[u * K + v]
                        starts_b[ns] = pb[u * K + v]
                        ns += 1
                sa = 0.0
                sb = 0.0
                for m in (i, j, k):
                    sa += mL[m] if wL[m] > 0 else a0
                    sb += mR[m] if wR[m] > 0 else b0
                starts_a[ns] = sa / 3
                starts_b[ns] = sb / 3
                ns += 1
                starts_a[ns] = a0
                starts_b[ns] = b0
                ns += 1
                for s in range(ns):
                    a, b, ok = _newton3(i, j, k, starts_a[s], starts_b[s], F, wL, mL, wR, mR)
                    if not ok:
                        continue
                    col = 0
                    for m in (i, j, k):
                        A[0, col] = 2 * wL[m] * (a - mL[m])
                        A[1, col] = 2 * wR[m] * (b - mR[m])
                        A[2, col] = 1.0
                        col += 1
                    lam, solved = _solve3(A, rhs)
                    if not solved:
                        continue
                    if lam[0] < -1e-9 or lam[1] < -1e-9 or lam[2] < -1e-9:
                        continue
                    z = max(_risk2(i, a, b, F, wL, mL, wR, mR),
                            max(_risk2(j, a, b, F, wL, mL, wR, mR), _risk2(k, a, b, F, wL, mL, wR, mR)))
                    if z < best_z and _feasible(z, a, b, F, wL, mL, wR, mR):
                        best_a, best_b, best_z, found = a, b, z, True
                    break
    if found:
        return best_a, best_b, best_z, STATUS_PATIENCE
    th, z, _, _, _ = eg2_kernel(F, wL, mL, wR, mR, a0, b0, gamma, tmax, delta, patience)
    return th[0], th[1], z, STATUS_FALLBACK


@njit(cache=True)
def eg2_kernel(F, wL, mL, wR, mR, a0, b0, gamma, tmax, delta, patience):
    """Extragradient on the two-value problem, posed as a 2-leaf instance."""
    K = F.shape[0]
    cnt = np.empty((K, 2))
    mu = np.empty((K, 2))
    inv_n = np.ones(K)
    for e in range(K):
        cnt[e, 0] = wL[e]
        cnt[e, 1] = wR[e]
        mu[e, 0] = mL[e]
        mu[e, 1] = mR[e]
    th0 = np.array([a0, b0])
    return eg_kernel(cnt, mu, F.copy(), inv_n, th0, gamma, tmax, delta, patience)


# -- tree weights ------------------------------------------------------------

@njit(cache=True)
def _weight_risks(G, bvec, s, w, out):
    K = G.shape[0]
    B = w.shape[0]
    for e in range(K):
        q = 0.0
        for u in range(B):
            acc = 0.0
            for v in range(B):
                acc += G[e, u, v] * w[v]
            q += w[u] * acc
        lin = 0.0
        for u in range(B):
            lin += bvec[e, u] * w[u]
        out[e] = s[e] - 2.0 * lin + q


@njit(cache=True)
def _weight_grad(G, bvec, w, p, out):
    K = G.shape[0]
    B = w.shape[0]
    for u in range(B):
        out[u] = 0.0
    for e in range(K):
        if p[e] == 0.0:
            continue
        for u in range(B):
            acc = 0.0
            for v in range(B):
                acc += G[e, u, v] * w[v]
            out[u] += p[e] * 2.0 * (acc - bvec[e, u])


@njit(cache=True)
def eg_weights_kernel(G, bvec, s, w0, gamma, tmax, delta, patience):
    """Extragradient over (w, p) in simplex x simplex.

    R_e(w) = s_e - 2 b_e.w + w' G_e w. The starting point counts as the first
    best-so-far iterate, so the result never exceeds its max risk.
    """
    K = G.shape[0]
    B = w0.shape[0]
    w = w0.copy()
    p = np.full(K, 1.0 / K)
    R = np.empty(K)
    R2 = np.empty(K)
    g = np.empty(B)
    _weight_risks(G, bvec, s, w, R)
    best = w.copy()
    lbest = R.max()
    no_imp = 0
    status = STATUS_TMAX
    it = 0
    for j in range(tmax):
        it = j + 1
        _weight_risks(G, bvec, s, w, R)
        _weight_grad(G, bvec, w, p, g)
        w_half = proj_simplex(w - gamma * g)
        p_half = proj_simplex(p + gamma * R)
        _weight_risks(G, bvec, s, w_half, R2)
        _weight_grad(G, bvec, w_half, p_half, g)
        w = proj_simplex(w - gamma * g)
        p = proj_simplex(p + gamma * R2)
        _weight_risks(G, bvec, s, w, R)
        l = R.max()
        if not np.isfinite(l):
            status = STATUS_NONFINITE
            break
        if l < lbest - delta:
            lbest = l
            best[:] = w
            no_imp = 0
        else:
            no_imp += 1
        if no_imp >= patience:
            status = STATUS_PATIENCE
            break
    return best, lbest, p, it, status
