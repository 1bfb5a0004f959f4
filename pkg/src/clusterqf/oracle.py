"""Brute-force references and an exact Gaussian expectation engine.

Everything here exists to check the production estimators from an
independent direction: dense full-matrix recomputations with no block
shortcuts, literal leave-out OLS refits per cluster triple, and a degree-5
cubature that integrates polynomial functionals of Gaussian errors exactly.
Nothing in this module is used on the estimation path.
"""

from __future__ import annotations

import numpy as np

from .design import ClusteredDesign
from .errors import NotPSDError, SizeLimitError, ValidationError


# -- dense references -------------------------------------------------------


def _dense_parts(design: ClusteredDesign, A0: np.ndarray):
    W, n, G = design.W, design.n, design.G
    S = W.T @ W
    Sinv_Wt = np.linalg.solve(S, W.T)
    P = W @ Sinv_Wt
    M = np.eye(n) - P
    A = W @ np.linalg.solve(S, A0 @ Sinv_Wt)
    D = np.zeros((n, n))
    for g in range(G):
        r = design.rows(g)
        D[r, r] = np.linalg.solve(M[r, r], A[r, r])
    B = A - M @ D
    return P, M, A, B


def dense_reference_theta(design: ClusteredDesign, A0) -> float:
    """Leave-out point estimate from fully materialized n x n matrices."""
    A0 = np.asarray(A0, dtype=np.float64)
    if design.n > 500:
        raise SizeLimitError("dense reference supports n <= 500")
    _, _, _, B = _dense_parts(design, A0)
    return float(design.X @ B @ design.Y)


def _leaveout_fit(design: ClusteredDesign, left: frozenset):
    W = design.W
    S = W.T @ W
    WtY = W.T @ design.Y
    WtX = W.T @ design.X
    for g in left:
        r = design.rows(g)
        Wg = W[r]
        S = S - Wg.T @ Wg
        WtY = WtY - Wg.T @ design.Y[r]
        WtX = WtX - Wg.T @ design.X[r]
    return np.linalg.solve(S, WtY), np.linalg.solve(S, WtX)


def dense_reference_variances(design: ClusteredDesign, A0) -> tuple[float, float]:
    """Literal triple/double sums with explicit leave-out regressions.

    Recomputes every leave-out residual by refitting OLS on the reduced
    sample and every partialled annihilator block from its definition.
    Returns ``(l3co, l2co)``.
    """
    A0 = np.asarray(A0, dtype=np.float64)
    if design.n > 60 or design.G > 8:
        raise SizeLimitError("dense variance reference supports n <= 60, G <= 8")
    G, X, Y, W = design.G, design.X, design.Y, design.W
    _, M, _, B = _dense_parts(design, A0)
    for g in range(G):
        r = design.rows(g)
        B[r, r] = 0.0

    coeffs: dict[frozenset, tuple[np.ndarray, np.ndarray]] = {}

    def resid(g: int, left) -> tuple[np.ndarray, np.ndarray]:
        key = frozenset(left) | {g}
        if key not in coeffs:
            coeffs[key] = _leaveout_fit(design, key)
        gam, pi = coeffs[key]
        r = design.rows(g)
        return Y[r] - W[r] @ gam, X[r] - W[r] @ pi

    def mt(g: int, h: int, k: int) -> np.ndarray:
        # (M_gg - M_gh M_hh^{-1} M_hg)^{-1} (M_gk - M_gh M_hh^{-1} M_hk)
        rg, rh, rk = design.rows(g), design.rows(h), design.rows(k)
        Q = np.linalg.solve(M[rh, rh], np.hstack([M[rh, rg], M[rh, rk]]))
        ng = Q[:, : rg.stop - rg.start].shape[1]
        lead = M[rg, rg] - M[rg, rh] @ Q[:, :ng]
        rhs = M[rg, rk] - M[rg, rh] @ Q[:, ng:]
        return np.linalg.solve(lead, rhs)

    def blk(Q, a, b):
        return Q[design.rows(a), design.rows(b)]

    t = np.zeros(5)
    for g in range(G):
        rg = design.rows(g)
        for h in range(G):
            rh = design.rows(h)
            for k in range(G):
                rk = design.rows(k)
                if h != g and k != g:
                    yt_g, xt_g = resid(g, (h, k))
                    f1 = X[rh] @ blk(B, h, g) @ Y[rg]
                    t[0] += f1 * (X[rk] @ blk(B, k, g) @ yt_g)
                    f2 = Y[rk] @ blk(B, g, k).T @ xt_g
                    t[1] += f1 * f2
                    t[2] += (Y[rh] @ blk(B, g, h).T @ X[rg]) * f2
                if h != g and k != h:
                    yt_h, xt_h = resid(h, (g, k))
                    inner = Y[rh] @ blk(B, g, h).T @ mt(g, h, k) @ X[rk]
                    t[3] += (yt_h @ blk(B, g, h).T @ X[rg]) * inner
                    t[4] += (xt_h @ blk(B, h, g) @ Y[rg]) * inner
    l3co = t[0] + 2.0 * t[1] + t[2] - (t[3] + t[4])

    l2co = 0.0
    for g in range(G):
        inner = 0.0
        for h in range(G):
            if h == g:
                continue
            yt_g, xt_g = resid(g, (h,))
            rh = design.rows(h)
            inner += X[rh] @ blk(B, h, g) @ yt_g
            inner += Y[rh] @ blk(B, g, h).T @ xt_g
        l2co += inner * inner
    return float(l3co), float(l2co)


# -- exact Gaussian expectations -------------------------------------------


def cubature_rule(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-5 fully symmetric rule for the standard Gaussian in ``dim``.

    Returns ``2 * dim**2 + 1`` abscissae and weights; weights may be
    negative for ``dim > 4``, which is harmless for polynomial exactness.
    """
    m = int(dim)
    if m < 1:
        raise ValidationError("dimension must be positive")
    r = np.sqrt(m + 2.0)
    s = np.sqrt((m + 2.0) / 2.0)
    w0 = 2.0 / (m + 2.0)
    w1 = (4.0 - m) / (2.0 * (m + 2.0) ** 2)
    w2 = 1.0 / (m + 2.0) ** 2
    count = 2 * m * m + 1
    pts = np.zeros((count, m))
    wts = np.empty(count)
    wts[0] = w0
    idx = 1
    for i in range(m):
        pts[idx, i] = r
        pts[idx + 1, i] = -r
        wts[idx:idx + 2] = w1
        idx += 2
    for i in range(m):
        for j in range(i + 1, m):
            for si in (s, -s):
                for sj in (s, -s):
                    pts[idx, i] = si
                    pts[idx, j] = sj
                    wts[idx] = w2
                    idx += 1
    assert idx == count
    return pts, wts


def gaussian_expectation(f, Sigma: np.ndarray, degree: int = 4) -> float:
    """Exact ``E f(e)`` for ``e ~ N(0, Sigma)`` and polynomial ``f``.

    ``f`` must be a polynomial of total degree at most 5 in the error
    vector (the estimators integrated here are at most quartic); the
    result is then exact up to floating-point roundoff.

    Raises
    ------
    NotPSDError
        If ``Sigma`` is not positive semidefinite.
    SizeLimitError
        For dimensions beyond 40.
    """
    if degree > 5:
        raise ValidationError("the cubature rule is exact to degree 5 only")
    Sigma = np.asarray(Sigma, dtype=np.float64)
    dim = Sigma.shape[0]
    if Sigma.shape != (dim, dim):
        raise ValidationError("Sigma must be square")
    if dim > 40:
        raise SizeLimitError("gaussian_expectation supports dimension <= 40")
    evals, evecs = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    if evals[-1] > 0 and evals[0] < -1e-10 * evals[-1]:
        raise NotPSDError(f"Sigma has eigenvalue {evals[0]:.3e} < 0")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    pts, wts = cubature_rule(dim)
    vals = np.empty(len(wts))
    for i in range(len(wts)):
        vals[i] = f(root @ pts[i])
    return float(np.sum(wts * vals))


def isserlis_quartic(Sigma: np.ndarray, a: int, b: int, c: int, d: int) -> float:
    """Closed-form ``E[e_a e_b e_c e_d]`` for centered Gaussians."""
    S = Sigma
    return float(S[a, b] * S[c, d] + S[a, c] * S[b, d] + S[a, d] * S[b, c])


# -- analytic expectations of the variance terms ----------------------------


def l3co_term_expectations(engine, Omega_blocks, Pi, Gamma) -> np.ndarray:
    """Exact expectations of the five triple-sum terms under known covariance.

    Derived from conditioning each term on the clusters it touches; the
    alternating combination reproduces the known-covariance variance.
    """
    from .variance import split_omega_blocks

    d = engine.ws.design
    parts = split_omega_blocks(Omega_blocks, d.cluster_sizes)
    B = engine.B
    Pi = np.asarray(Pi, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    H = B.T @ Pi
    Ht = B @ Gamma
    E = np.zeros(5)
    for g in range(d.G):
        rg = d.rows(g)
        OUg, OUVg, OVg = parts[g]
        E[0] += H[rg] @ OUg @ H[rg]
        E[1] += H[rg] @ OUVg @ Ht[rg]
        E[2] += Ht[rg] @ OVg @ Ht[rg]
        for h in range(d.G):
            rh = d.rows(h)
            OUh, OUVh, OVh = parts[h]
            Bhg = B[rh, rg]
            Bgh = B[rg, rh]
            E[0] += np.trace(Bhg @ OUg @ Bhg.T @ OVh)
            E[1] += np.trace(Bhg @ OUVg @ Bgh @ OUVh)
            E[2] += np.trace(Bgh.T @ OVg @ Bgh @ OUh)
            E[3] += np.trace(Bgh.T @ OVg @ Bgh @ OUh)
            E[4] += np.trace(Bhg @ OUVg @ Bgh @ OUVh)
    return E


def plugin_bias_expectation(engine, Omega_blocks) -> float:
    """Expected overfitting bias ``sum_g tr(A_{g,g} Omega_{UV,g})``."""
    from .variance import split_omega_blocks

    d = engine.ws.design
    parts = split_omega_blocks(Omega_blocks, d.cluster_sizes)
    total = 0.0
    for g in range(d.G):
        rg = d.rows(g)
        total += np.trace(engine.A[rg, rg] @ parts[g][1])
    return float(total)
