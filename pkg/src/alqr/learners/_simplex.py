"""Exterior-point simplex for linear quantile regression (numba).

A vertex is described by ``p`` basis rows that the fit interpolates. Each
iteration computes the dual multipliers of the basis rows; a multiplier
outside ``[tau - 1, tau]`` means releasing that row lowers the loss. The
coefficients then move along the released direction and the line search walks
the sorted residual sign-change points until the directional derivative turns
nonnegative, so one iteration can pass through several vertices.
"""

import numpy as np
from numba import njit

STATUS_OPTIMAL = 0
STATUS_SINGULAR = 1
STATUS_MAX_ITER = 2
STATUS_UNBOUNDED = 3
STATUS_FLAT = 4


@njit(cache=True)
def _weighted_select(ts, us, idx, m, target):
    """Position (after partial reordering of ``ts, us, idx``) of the first
    element in ascending ``ts`` order whose cumulative ``us`` reaches
    ``target``; -1 when the total stays below it. Expected O(m)."""
    lo = 0
    hi = m
    acc = 0.0
    while hi - lo > 8:
        # deterministic median-of-three pivot
        a = ts[lo]
        b = ts[(lo + hi) // 2]
        c = ts[hi - 1]
        if a > b:
            a, b = b, a
        if b > c:
            b = c
        pivot = a if a > b else b
        # three-way partition: < pivot | == pivot | > pivot
        lt = lo
        gt = hi
        i = lo
        while i < gt:
            if ts[i] < pivot:
                ts[lt], ts[i] = ts[i], ts[lt]
                us[lt], us[i] = us[i], us[lt]
                idx[lt], idx[i] = idx[i], idx[lt]
                lt += 1
                i += 1
            elif ts[i] > pivot:
                gt -= 1
                ts[gt], ts[i] = ts[i], ts[gt]
                us[gt], us[i] = us[i], us[gt]
                idx[gt], idx[i] = idx[i], idx[gt]
            else:
                i += 1
        s_lt = 0.0
        for k in range(lo, lt):
            s_lt += us[k]
        if acc + s_lt >= target:
            hi = lt
            continue
        s_eq = 0.0
        best = lt
        for k in range(lt, gt):
            s_eq += us[k]
            if idx[k] < idx[best]:
                best = k
        if acc + s_lt + s_eq >= target:
            # ties in t: enter the lowest row index among the tied block
            return best
        acc += s_lt + s_eq
        lo = gt
    # small remainder: insertion sort by (t, row index)
    for k in range(lo + 1, hi):
        tk = ts[k]
        uk = us[k]
        ik = idx[k]
        j = k - 1
        while j >= lo and (ts[j] > tk or (ts[j] == tk and idx[j] > ik)):
            ts[j + 1] = ts[j]
            us[j + 1] = us[j]
            idx[j + 1] = idx[j]
            j -= 1
        ts[j + 1] = tk
        us[j + 1] = uk
        idx[j + 1] = ik
    for k in range(lo, hi):
        acc += us[k]
        if acc >= target:
            return k
    return -1


@njit(cache=True)
def _solve_basis(X, y, basis):
    p = basis.shape[0]
    Xh = np.empty((p, p))
    yh = np.empty(p)
    for k in range(p):
        Xh[k, :] = X[basis[k], :]
        yh[k] = y[basis[k]]
    binv = np.linalg.inv(Xh)
    return binv, binv @ yh


@njit(cache=True)
def greedy_basis(X, order):
    """First ``p`` rows in ``order`` that are linearly independent (Gram-Schmidt)."""
    n, p = X.shape
    q = np.zeros((p, p))
    basis = np.empty(p, dtype=np.int64)
    m = 0
    for t in range(n):
        i = order[t]
        v = X[i, :].copy()
        nrm0 = np.sqrt(np.sum(v * v))
        if nrm0 == 0.0:
            continue
        for _ in range(2):
            for k in range(m):
                v -= np.dot(q[k], v) * q[k]
        nrm = np.sqrt(np.sum(v * v))
        if nrm > 1e-9 * nrm0:
            q[m] = v / nrm
            basis[m] = i
            m += 1
            if m == p:
                return basis, True
    return basis, False


@njit(cache=True)
def simplex_qr(X, y, tau, basis, max_iter):
    """Run the simplex from the vertex interpolating ``basis``.

    Returns ``(coef, basis, status, iterations)``.
    """
    n, p = X.shape
    basis = basis.copy()
    in_basis = np.zeros(n, dtype=np.bool_)
    for k in range(p):
        in_basis[basis[k]] = True
    binv, b = _solve_basis(X, y, basis)
    if not np.all(np.isfinite(b)):
        return b, basis, STATUS_SINGULAR, 0
    lo = tau - 1.0
    hi = tau
    tol = 1e-10
    ts = np.empty(n)
    us = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    r = y - X @ b
    pos = r >= 0.0
    v = np.zeros(p)
    lex_steps = 0
    for it in range(max_iter):
        if it % 32 == 0:
            # refresh the incrementally maintained residuals and v
            r = y - X @ b
            for i in range(n):
                pos[i] = r[i] >= 0.0
            v[:] = 0.0
            for i in range(n):
                if not in_basis[i]:
                    psi = hi if pos[i] else lo
                    for j in range(p):
                        v[j] += X[i, j] * psi
        g = -(binv.T @ v)
        worst = 0.0
        k_out = -1
        sigma = 0.0
        for k in range(p):
            if g[k] < lo - tol and lo - g[k] > worst:
                worst = lo - g[k]
                k_out = k
                sigma = 1.0
            elif g[k] > hi + tol and g[k] - hi > worst:
                worst = g[k] - hi
                k_out = k
                sigma = -1.0
        if k_out < 0:
            # Optimal. A multiplier on the boundary of [tau - 1, tau] marks an
            # edge of the optimal face; follow it if it lowers the coefficients
            # lexicographically, so flat optima resolve to the smallest vertex.
            lex_steps += 1
            if lex_steps > 10 * p + 10:
                return b, basis, STATUS_FLAT, it
            for k in range(p):
                if abs(g[k] - lo) <= 1e-9:
                    sg = 1.0
                elif abs(g[k] - hi) <= 1e-9:
                    sg = -1.0
                else:
                    continue
                big = 0.0
                for j in range(p):
                    if abs(binv[j, k]) > big:
                        big = abs(binv[j, k])
                for j in range(p):
                    if abs(binv[j, k]) > 1e-12 * big:
                        if sg * binv[j, k] < 0.0:
                            k_out = k
                            sigma = sg
                        break
                if k_out >= 0:
                    break
            if k_out < 0:
                # lexicographic minimum of the optimal face (unless degenerate)
                r_chk = y - X @ b
                scale = 1.0
                for i in range(n):
                    if abs(y[i]) > scale:
                        scale = abs(y[i])
                for i in range(n):
                    if not in_basis[i] and abs(r_chk[i]) <= 1e-12 * scale:
                        return b, basis, STATUS_FLAT, it
                return b, basis, STATUS_OPTIMAL, it
            worst = 0.0
        delta = sigma * binv[:, k_out]
        u = X @ delta
        m = 0
        for i in range(n):
            if in_basis[i]:
                continue
            ui = u[i]
            ri = r[i]
            if ri > 0.0 and ui > 0.0:
                ts[m] = ri / ui
            elif ri < 0.0 and ui < 0.0:
                ts[m] = ri / ui
            elif ri == 0.0 and ui > 0.0:
                ts[m] = 0.0
            else:
                continue
            us[m] = abs(ui)
            idx[m] = i
            m += 1
        if m == 0:
            return b, basis, STATUS_UNBOUNDED, it
        pos_k = _weighted_select(ts, us, idx, m, worst)
        enter = -1
        t_star = 0.0
        if pos_k >= 0:
            enter = idx[pos_k]
            t_star = ts[pos_k]
        if enter < 0:
            return b, basis, STATUS_UNBOUNDED, it
        leave = basis[k_out]
        basis[k_out] = enter
        in_basis[leave] = False
        in_basis[enter] = True
        z = X[enter, :] - X[leave, :]
        col = binv[:, k_out].copy()
        zb = z @ binv
        denom = 1.0 + zb[k_out]
        if (it + 1) % 32 == 0 or abs(denom) < 1e-14:
            binv, b = _solve_basis(X, y, basis)
            # the refresh at the top of the next iteration recomputes r and v
            if (it + 1) % 32 != 0:
                r = y - X @ b
                for i in range(n):
                    pos[i] = r[i] >= 0.0
                v[:] = 0.0
                for i in range(n):
                    if not in_basis[i]:
                        psi = hi if pos[i] else lo
                        for j in range(p):
                            v[j] += X[i, j] * psi
        else:
            for a_ in range(p):
                for c_ in range(p):
                    binv[a_, c_] -= col[a_] * zb[c_] / denom
            b = b + t_star * delta
            # entering row leaves the nonbasic sum
            psi = hi if pos[enter] else lo
            for j in range(p):
                v[j] -= X[enter, j] * psi
            for i in range(n):
                if in_basis[i]:
                    continue
                r[i] -= t_star * u[i]
                if i == leave:
                    continue
                new_pos = r[i] >= 0.0
                if new_pos != pos[i]:
                    d = (hi - lo) if new_pos else (lo - hi)
                    for j in range(p):
                        v[j] += X[i, j] * d
                    pos[i] = new_pos
            r[enter] = 0.0
            pos[enter] = True
            # leaving row joins the nonbasic sum
            r[leave] = y[leave] - np.dot(X[leave, :], b)
            pos[leave] = r[leave] >= 0.0
            psi = hi if pos[leave] else lo
            for j in range(p):
                v[j] += X[leave, j] * psi
        if not np.all(np.isfinite(b)):
            return b, basis, STATUS_SINGULAR, it
    return b, basis, STATUS_MAX_ITER, max_iter
