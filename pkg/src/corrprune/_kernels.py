"""Compiled inner loops for the selective scan (forward and reverse).

The per-(step, channel, state) decay ``exp(delta A)`` and, for the exact
zero-order-hold input rule, ``expm1(delta A) / A`` are precomputed with
vectorised numpy and passed in; the loops only carry the recurrence.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def scan_forward(x, dt, decay, bfac, Bm, C, D, zoh):
    nb, length, nch = x.shape
    ns = Bm.shape[2]
    y = np.empty_like(x)
    h = np.zeros((nch, ns), dtype=x.dtype)
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(length):
            for d in range(nch):
                xv = x[b, t, d]
                delta = dt[b, t, d]
                acc = D[d] * xv
                for s in range(ns):
                    if zoh:
                        u = bfac[b, t, d, s] * Bm[b, t, s] * xv
                    else:
                        u = delta * Bm[b, t, s] * xv
                    hv = decay[b, t, d, s] * h[d, s] + u
                    h[d, s] = hv
                    acc += C[b, t, s] * hv
                y[b, t, d] = acc
    return y


@numba.njit(cache=True)
def scan_backward(x, dt, A, decay, bfac, Bm, C, D, gy, zoh):
    nb, length, nch = x.shape
    ns = Bm.shape[2]
    gx = np.empty_like(x)
    gdt = np.empty_like(x)
    gA = np.zeros(A.shape, dtype=x.dtype)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(C)
    gD = np.zeros(D.shape, dtype=x.dtype)
    hs = np.empty((length + 1, nch, ns), dtype=x.dtype)
    gh = np.empty((nch, ns), dtype=x.dtype)
    for b in range(nb):
        # replay the chain; hs[t + 1] is the state after step t
        hs[0, :, :] = 0.0
        for t in range(length):
            for d in range(nch):
                xv = x[b, t, d]
                delta = dt[b, t, d]
                for s in range(ns):
                    if zoh:
                        u = bfac[b, t, d, s] * Bm[b, t, s] * xv
                    else:
                        u = delta * Bm[b, t, s] * xv
                    hs[t + 1, d, s] = decay[b, t, d, s] * hs[t, d, s] + u
        gh[:, :] = 0.0
        for t in range(length - 1, -1, -1):
            for d in range(nch):
                xv = x[b, t, d]
                delta = dt[b, t, d]
                g = gy[b, t, d]
                gxv = D[d] * g
                gD[d] += g * xv
                gdelta = 0.0
                for s in range(ns):
                    a = A[d, s]
                    dec = decay[b, t, d, s]
                    bm = Bm[b, t, s]
                    gC[b, t, s] += g * hs[t + 1, d, s]
                    ghs = gh[d, s] + g * C[b, t, s]
                    g_decay = ghs * hs[t, d, s]
                    g_bbar = ghs * xv
                    if zoh:
                        em1 = bfac[b, t, d, s] * a
                        bbar = bfac[b, t, d, s] * bm
                        gdelta += g_bbar * dec * bm
                        gA[d, s] += g_bbar * bm * (delta * dec * a - em1) / (a * a)
                        gB[b, t, s] += g_bbar * bfac[b, t, d, s]
                    else:
                        bbar = delta * bm
                        gdelta += g_bbar * bm
                        gB[b, t, s] += g_bbar * delta
                    gxv += ghs * bbar
                    gdelta += g_decay * dec * a
                    gA[d, s] += g_decay * dec * delta
                    gh[d, s] = ghs * dec
                gx[b, t, d] = gxv
                gdt[b, t, d] = gdelta
    return gx, gdt, gA, gB, gC, gD


@numba.njit(cache=True)
def smallest_k(rows, kc):
    """Indices of the ``kc`` smallest entries of each row (unordered) and
    the smallest value left outside that set (inf when nothing is left)."""
    nr, n = rows.shape
    idx = np.empty((nr, kc), dtype=np.int64)
    floor = np.empty(nr, dtype=np.float64)
    val = np.empty(kc, dtype=rows.dtype)
    ix = np.empty(kc, dtype=np.int64)
    for r in range(nr):
        # max-heap holding the kc smallest entries seen so far
        cnt = 0
        rest = np.inf
        for j in range(n):
            v = rows[r, j]
            if cnt < kc:
                p = cnt
                cnt += 1
                while p > 0:
                    q = (p - 1) >> 1
                    if val[q] >= v:
                        break
                    val[p] = val[q]
                    ix[p] = ix[q]
                    p = q
                val[p] = v
                ix[p] = j
            elif v < val[0]:
                if val[0] < rest:
                    rest = val[0]
                p = 0
                while True:
                    c = 2 * p + 1
                    if c >= kc:
                        break
                    if c + 1 < kc and val[c + 1] > val[c]:
                        c += 1
                    if val[c] <= v:
                        break
                    val[p] = val[c]
                    ix[p] = ix[c]
                    p = c
                val[p] = v
                ix[p] = j
            elif v < rest:
                rest = v
        for m in range(kc):
            idx[r, m] = ix[m]
        floor[r] = rest
    return idx, floor


@numba.njit(cache=True)
def candidate_distances(F, cand):
    """Exact squared distances from each row of F (B, N, d) to its candidates."""
    nb, n, kc = cand.shape
    nd = F.shape[2]
    out = np.empty((nb, n, kc), dtype=np.float64)
    for b in range(nb):
        for i in range(n):
            for m in range(kc):
                j = cand[b, i, m]
                acc = 0.0
                for c in range(nd):
                    diff = F[b, i, c] - F[b, j, c]
                    acc += diff * diff
                out[b, i, m] = acc
    return out


@numba.njit(cache=True)
def scatter_add_rows(g, flat, nrows):
    """``out[flat[m]] += g[m]`` over rows of a 2-D array."""
    out = np.zeros((nrows, g.shape[1]), dtype=g.dtype)
    for m in range(flat.shape[0]):
        r = flat[m]
        for c in range(g.shape[1]):
            out[r, c] += g[m, c]
    return out
