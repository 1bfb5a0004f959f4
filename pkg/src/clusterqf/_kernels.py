"""Compiled inner loops for the leave-out variance estimators.

The triple sum over cluster indices ``(g, h, k)`` is evaluated once per
unordered pair ``{g, h}``: a single guarded factorization of the
two-cluster annihilator block ``M_{gh,gh}`` serves the pair residuals, the
partialling rows needed by the ``M-tilde`` terms, and a Schur-complement
update per third cluster ``k``, and the update feeds the accumulators of
both orderings of the pair.  All loops run in a fixed order so results are
bitwise reproducible regardless of how callers distribute work.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _chol_inplace(A, m, L):
    """Lower Cholesky of A[:m,:m] into L[:m,:m]; False if not SPD."""
    for i in range(m):
        for j in range(i + 1):
            s = A[i, j]
            for t in range(j):
                s -= L[i, t] * L[j, t]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _chol_solve(L, m, B, nrhs, out):
    """Solve (L L') out = B for B of shape (m, nrhs)."""
    for c in range(nrhs):
        for i in range(m):
            s = B[i, c]
            for t in range(i):
                s -= L[i, t] * out[t, c]
            out[i, c] = s / L[i, i]
        for i in range(m - 1, -1, -1):
            s = out[i, c]
            for t in range(i + 1, m):
                s -= L[t, i] * out[t, c]
            out[i, c] = s / L[i, i]


@njit(cache=True)
def _guarded_factor(A, m, tn, L, S):
    """Factor A (SPD expected) with the ridge guard at level tn.

    Returns 0 when ``lambda_min(A) >= tn`` and the factor is exact, 1 when
    the ridge fired and ``L`` factors ``A + t I`` (t escalates in the
    pathological case where one shift is not enough).
    """
    gmin = np.inf
    for i in range(m):
        r = 0.0
        for j in range(m):
            if j != i:
                r += abs(A[i, j])
        v = A[i, i] - r
        if v < gmin:
            gmin = v
    if gmin >= tn:
        _chol_inplace(A, m, L)
        return 0
    for i in range(m):
        for j in range(m):
            S[i, j] = A[i, j]
        S[i, i] -= tn
    if _chol_inplace(S, m, L):
        _chol_inplace(A, m, L)
        return 0
    t = tn
    while True:
        for i in range(m):
            for j in range(m):
                S[i, j] = A[i, j]
            S[i, i] += t
        if _chol_inplace(S, m, L):
            return 1
        t *= 2.0


@njit(cache=True)
def l2co_kernel(M, starts, MY, MX, VVT, UUT, tn):
    """Per-cluster inner sums of the leave-two-clusters-out estimator.

    Returns ``inner`` of length G with
    ``inner[g] = sum_h [X_h' B_{h,g} Ytilde_{g,-h} + Y_h' B_{g,h}' Xtilde_{g,-h}]``
    and the count of ridge-regularized pair solves.
    """
    G = starts.shape[0] - 1
    smax = 0
    for g in range(G):
        sz = starts[g + 1] - starts[g]
        if sz > smax:
            smax = sz
    m2 = 2 * smax
    MGH = np.empty((m2, m2))
    L = np.empty((m2, m2))
    SC = np.empty((m2, m2))
    rhs = np.empty((m2, 2))
    w = np.empty((m2, 2))
    inner = np.zeros(G)
    nreg = 0

    for g in range(G):
        g0 = starts[g]
        ng = starts[g + 1] - g0
        for h in range(g + 1, G):
            h0 = starts[h]
            nh = starts[h + 1] - h0
            m = ng + nh
            for i in range(ng):
                for j in range(ng):
                    MGH[i, j] = M[g0 + i, g0 + j]
                for j in range(nh):
                    MGH[i, ng + j] = M[g0 + i, h0 + j]
                rhs[i, 0] = MY[g0 + i]
                rhs[i, 1] = MX[g0 + i]
            for i in range(nh):
                for j in range(ng):
                    MGH[ng + i, j] = M[h0 + i, g0 + j]
                for j in range(nh):
                    MGH[ng + i, ng + j] = M[h0 + i, h0 + j]
                rhs[ng + i, 0] = MY[h0 + i]
                rhs[ng + i, 1] = MX[h0 + i]
            nreg += _guarded_factor(MGH, m, tn, L, SC)
            _chol_solve(L, m, rhs, 2, w)
            sy = 0.0
            sx = 0.0
            for j in range(ng):
                sy += VVT[h, g0 + j] * w[j, 0]
                sx += UUT[h, g0 + j] * w[j, 1]
            inner[g] += sy + sx
            sy = 0.0
            sx = 0.0
            for j in range(nh):
                sy += VVT[g, h0 + j] * w[ng + j, 0]
                sx += UUT[g, h0 + j] * w[ng + j, 1]
            inner[h] += sy + sx
    return inner, nreg


@njit(cache=True)
def l3co_kernel(M, P, B, starts, MY, MX, X, Y, SXY, VVT, UUT, tn):
    """Accumulate the five leave-three-clusters-out variance terms.

    Inputs are the full annihilator/projection/corrected matrices, cluster
    offsets, residual and outcome vectors, and the precomputed segment
    products ``SXY[h, g] = X_h' B_{h,g} Y_g``,
    ``VVT[k, g0+j] = (B_{k,g}' X_k)_j`` and ``UUT[k, g0+j] = (B_{g,k} Y_k)_j``.

    Returns per-outer-cluster partial sums of shape (G, 5) plus the counts
    of regularized pair factorizations and triple Schur solves.  Partials
    are combined by the caller in cluster order.
    """
    n = M.shape[0]
    G = starts.shape[0] - 1
    smax = 0
    for g in range(G):
        sz = starts[g + 1] - starts[g]
        if sz > smax:
            smax = sz
    m2 = 2 * smax
    MGH = np.empty((m2, m2))
    L = np.empty((m2, m2))
    LT = np.empty((m2, m2))
    dinv = np.empty(m2)
    SC = np.empty((m2, m2))
    rhs = np.empty((m2, 2))
    wY = np.empty(m2)
    wX = np.empty(m2)
    browg = np.empty((m2, 1))
    browh = np.empty((m2, 1))
    bsol = np.empty((m2, 1))
    NkT = np.empty((smax, m2))
    CkT = np.empty((smax, m2))
    Sk = np.empty((smax, smax))
    Lk = np.empty((smax, smax))
    SCk = np.empty((smax, smax))
    rhoY = np.empty(smax)
    rhoX = np.empty(smax)
    zY = np.empty(smax)
    zX = np.empty(smax)
    rY = np.empty(m2)
    rX = np.empty(m2)
    arow_g = np.empty(n)
    crow_g = np.empty(n)
    arow_h = np.empty(n)
    crow_h = np.empty(n)

    partials = np.zeros((G, 5))
    nreg_pair = 0
    nreg_triple = 0

    for g in range(G):
        g0 = starts[g]
        ng = starts[g + 1] - g0
        for h in range(g + 1, G):
            h0 = starts[h]
            nh = starts[h + 1] - h0
            m = ng + nh
            sxy_hg = SXY[h, g]
            sxy_gh = SXY[g, h]
            for i in range(ng):
                for j in range(ng):
                    MGH[i, j] = M[g0 + i, g0 + j]
                for j in range(nh):
                    MGH[i, ng + j] = M[g0 + i, h0 + j]
                rhs[i, 0] = MY[g0 + i]
                rhs[i, 1] = MX[g0 + i]
            for i in range(nh):
                for j in range(ng):
                    MGH[ng + i, j] = M[h0 + i, g0 + j]
                for j in range(nh):
                    MGH[ng + i, ng + j] = M[h0 + i, h0 + j]
                rhs[ng + i, 0] = MY[h0 + i]
                rhs[ng + i, 1] = MX[h0 + i]
            nreg_pair += _guarded_factor(MGH, m, tn, L, SC)
            for i in range(m):
                dinv[i] = 1.0 / L[i, i]
                for t in range(m):
                    LT[i, t] = L[t, i]
            # pair solve: w = M_{gh,gh}^{-1} [(MY)_gh, (MX)_gh]
            for i in range(m):
                sy = rhs[i, 0]
                sx = rhs[i, 1]
                for t in range(i):
                    sy -= L[i, t] * wY[t]
                    sx -= L[i, t] * wX[t]
                wY[i] = sy * dinv[i]
                wX[i] = sx * dinv[i]
            for i in range(m - 1, -1, -1):
                sy = wY[i]
                sx = wX[i]
                for t in range(i + 1, m):
                    sy -= LT[i, t] * wY[t]
                    sx -= LT[i, t] * wX[t]
                wY[i] = sy * dinv[i]
                wX[i] = sx * dinv[i]

            # k equal to the pair partner: leave-out set collapses to {g, h}
            d1 = 0.0
            d2 = 0.0
            for j in range(ng):
                d1 += VVT[h, g0 + j] * wY[j]
                d2 += UUT[h, g0 + j] * wX[j]
            partials[g, 0] += sxy_hg * d1
            partials[g, 1] += sxy_hg * d2
            partials[g, 2] += sxy_gh * d2
            partials[g, 3] += d1 * sxy_hg
            partials[g, 4] += d2 * sxy_hg
            d1 = 0.0
            d2 = 0.0
            for j in range(nh):
                d1 += VVT[g, h0 + j] * wY[ng + j]
                d2 += UUT[g, h0 + j] * wX[ng + j]
            partials[h, 0] += sxy_gh * d1
            partials[h, 1] += sxy_gh * d2
            partials[h, 2] += sxy_hg * d2
            partials[h, 3] += d1 * sxy_gh
            partials[h, 4] += d2 * sxy_gh

            # partialling rows for the M-tilde terms, one per orientation:
            # arow = P_{pair-partner,.}' xi with xi = B_{partner,outer} Y_outer
            for i in range(n):
                arow_g[i] = 0.0
                arow_h[i] = 0.0
            for j in range(nh):
                xi = UUT[g, h0 + j]
                for i in range(n):
                    arow_g[i] += P[h0 + j, i] * xi
            for j in range(ng):
                xi = UUT[h, g0 + j]
                for i in range(n):
                    arow_h[i] += P[g0 + j, i] * xi
            for j in range(ng):
                browg[j, 0] = arow_g[g0 + j]
                browh[j, 0] = arow_h[g0 + j]
            for j in range(nh):
                browg[ng + j, 0] = arow_g[h0 + j]
                browh[ng + j, 0] = arow_h[h0 + j]
            _chol_solve(L, m, browg, 1, bsol)
            for i in range(n):
                crow_g[i] = 0.0
            for j in range(ng):
                b = bsol[j, 0]
                for i in range(n):
                    crow_g[i] += P[g0 + j, i] * b
            for j in range(nh):
                b = bsol[ng + j, 0]
                for i in range(n):
                    crow_g[i] += P[h0 + j, i] * b
            _chol_solve(L, m, browh, 1, bsol)
            for i in range(n):
                crow_h[i] = 0.0
            for j in range(ng):
                b = bsol[j, 0]
                for i in range(n):
                    crow_h[i] += P[g0 + j, i] * b
            for j in range(nh):
                b = bsol[ng + j, 0]
                for i in range(n):
                    crow_h[i] += P[h0 + j, i] * b

            for k in range(G):
                if k == g or k == h:
                    continue
                k0 = starts[k]
                nk = starts[k + 1] - k0
                for c in range(nk):
                    for i in range(ng):
                        NkT[c, i] = M[g0 + i, k0 + c]
                    for i in range(nh):
                        NkT[c, ng + i] = M[h0 + i, k0 + c]
                # C_k' = (M_{gh,gh}^{-1} M_{gh,k})'
                for c in range(nk):
                    for i in range(m):
                        s = NkT[c, i]
                        for t in range(i):
                            s -= L[i, t] * CkT[c, t]
                        CkT[c, i] = s * dinv[i]
                    for i in range(m - 1, -1, -1):
                        s = CkT[c, i]
                        for t in range(i + 1, m):
                            s -= LT[i, t] * CkT[c, t]
                        CkT[c, i] = s * dinv[i]
                # Schur complement S_k = M_{k,k} - N_k' C_k
                for i in range(nk):
                    for j in range(nk):
                        s = M[k0 + i, k0 + j]
                        for t in range(m):
                            s -= NkT[i, t] * CkT[j, t]
                        Sk[i, j] = s
                nreg_triple += _guarded_factor(Sk, nk, tn, Lk, SCk)
                for i in range(nk):
                    sy = MY[k0 + i]
                    sx = MX[k0 + i]
                    for t in range(m):
                        sy -= NkT[i, t] * wY[t]
                        sx -= NkT[i, t] * wX[t]
                    rhoY[i] = sy
                    rhoX[i] = sx
                for i in range(nk):
                    sy = rhoY[i]
                    sx = rhoX[i]
                    for t in range(i):
                        sy -= Lk[i, t] * zY[t]
                        sx -= Lk[i, t] * zX[t]
                    zY[i] = sy / Lk[i, i]
                    zX[i] = sx / Lk[i, i]
                for i in range(nk - 1, -1, -1):
                    sy = zY[i]
                    sx = zX[i]
                    for t in range(i + 1, nk):
                        sy -= Lk[t, i] * zY[t]
                        sx -= Lk[t, i] * zX[t]
                    zY[i] = sy / Lk[i, i]
                    zX[i] = sx / Lk[i, i]
                # leave-three-out residuals at both pair members
                for t in range(m):
                    sy = wY[t]
                    sx = wX[t]
                    for c in range(nk):
                        sy -= CkT[c, t] * zY[c]
                        sx -= CkT[c, t] * zX[c]
                    rY[t] = sy
                    rX[t] = sx
                # orientation with outer cluster g
                d1 = 0.0
                d2 = 0.0
                d4 = 0.0
                d5 = 0.0
                for j in range(ng):
                    d1 += VVT[k, g0 + j] * rY[j]
                    d2 += UUT[k, g0 + j] * rX[j]
                    d4 += VVT[h, g0 + j] * rY[j]
                    d5 += UUT[h, g0 + j] * rX[j]
                kap = 0.0
                for c in range(nk):
                    kap -= (arow_g[k0 + c] + crow_g[k0 + c]) * X[k0 + c]
                partials[g, 0] += sxy_hg * d1
                partials[g, 1] += sxy_hg * d2
                partials[g, 2] += sxy_gh * d2
                partials[g, 3] += d4 * kap
                partials[g, 4] += d5 * kap
                # orientation with outer cluster h
                d1 = 0.0
                d2 = 0.0
                d4 = 0.0
                d5 = 0.0
                for j in range(nh):
                    d1 += VVT[k, h0 + j] * rY[ng + j]
                    d2 += UUT[k, h0 + j] * rX[ng + j]
                    d4 += VVT[g, h0 + j] * rY[ng + j]
                    d5 += UUT[g, h0 + j] * rX[ng + j]
                kap = 0.0
                for c in range(nk):
                    kap -= (arow_h[k0 + c] + crow_h[k0 + c]) * X[k0 + c]
                partials[h, 0] += sxy_gh * d1
                partials[h, 1] += sxy_gh * d2
                partials[h, 2] += sxy_hg * d2
                partials[h, 3] += d4 * kap
                partials[h, 4] += d5 * kap
    return partials, nreg_pair, nreg_triple
