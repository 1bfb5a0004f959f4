"""Gram factorization and cluster-block projection algebra.

Everything downstream runs through the blocks of the hat matrix
``P = W (W'W)^{-1} W'`` and the annihilator ``M = I - P``.  A
:class:`ProjectionWorkspace` owns the factorized Gram matrix, the residual
vectors ``MY`` and ``MX``, and (memory permitting) the fully materialized
``P``/``M``; blocks are recomputed from the whitened factor otherwise.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .design import ClusteredDesign
from .errors import RankDeficientError

DEFAULT_CACHE_BUDGET = 1 << 30  # bytes of block cache the workspace may use


def default_ridge_threshold(n: int) -> float:
    """Ridge guard level for leave-out block solves, ``1 / log(n^2)``."""
    if n < 2:
        return 1.0
    return 1.0 / math.log(float(n) ** 2)


@dataclass
class GramFactor:
    """Cholesky factorization of the Gram matrix ``S = W'W``.

    ``chol`` is lower triangular with ``chol @ chol.T == S``.
    """

    S: np.ndarray
    chol: np.ndarray
    lambda_min: float
    lambda_max: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``S x = rhs`` through the Cholesky factor."""
        z = sla.solve_triangular(self.chol, rhs, lower=True)
        return sla.solve_triangular(self.chol, z, lower=True, trans="T")


def gram_factorize(design: ClusteredDesign, rank_rtol: float = 1e-12) -> GramFactor:
    """Factorize ``W'W`` and check it for rank deficiency.

    Raises
    ------
    RankDeficientError
        When ``lambda_min(W'W) < rank_rtol * lambda_max(W'W)``; the message
        suggests dropping collinear columns.
    """
    W = design.W
    S = W.T @ W
    S = 0.5 * (S + S.T)
    eigs = np.linalg.eigvalsh(S)
    lam_min, lam_max = float(eigs[0]), float(eigs[-1])
    if lam_max <= 0 or lam_min < rank_rtol * lam_max:
        raise RankDeficientError(
            "W'W is numerically rank deficient "
            f"(lambda_min={lam_min:.3e}, lambda_max={lam_max:.3e}); "
            "drop collinear regressor columns and retry"
        )
    chol = np.linalg.cholesky(S)
    design.freeze()
    return GramFactor(S=S, chol=chol, lambda_min=lam_min, lambda_max=lam_max)


@dataclass
class GuardStats:
    """Caller-visible tally of ridge-regularized solves (thread-safe)."""

    count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, k: int = 1) -> None:
        with self._lock:
            self.count += k

    def reset(self) -> None:
        with self._lock:
            self.count = 0


def block_solve_guarded(
    block: np.ndarray,
    rhs: np.ndarray,
    t_n: float,
    stats: GuardStats | None = None,
):
    """Solve ``block @ x = rhs`` with a ridge fallback for tiny eigenvalues.

    The block must be symmetric.  When ``lambda_min(block) >= t_n`` the
    solve is exact (plain Cholesky); otherwise ``block + t_n * I`` is
    solved instead and the result is flagged.

    Returns
    -------
    x : ndarray
    regularized : bool
    """
    if t_n <= 0:
        raise ValueError("ridge threshold t_n must be positive")
    block = np.asarray(block, dtype=np.float64)
    lam_min = float(np.linalg.eigvalsh(block)[0])
    if lam_min >= t_n:
        c, low = sla.cho_factor(block, lower=True)
        return sla.cho_solve((c, low), rhs), False
    if stats is not None:
        stats.bump()
    shifted = block + t_n * np.eye(block.shape[0])
    if lam_min + t_n > 0:
        c, low = sla.cho_factor(shifted, lower=True)
        return sla.cho_solve((c, low), rhs), True
    # Pathological block (eigenvalue below -t_n): clamp the spectrum.
    w, V = np.linalg.eigh(block)
    w = np.maximum(w + t_n, t_n)
    return V @ ((V.T @ rhs).T / w).T, True


class ProjectionWorkspace:
    """Frozen design plus Gram factor, residuals, and projection blocks.

    After construction all reads are safe from concurrent workers: the
    design arrays are read-only, the full ``P``/``M`` matrices (when they
    fit the cache budget) are computed up front, and the fallback block
    cache is an insert-once map guarded by a lock.
    """

    def __init__(
        self,
        design: ClusteredDesign,
        gram: GramFactor | None = None,
        cache_budget: int = DEFAULT_CACHE_BUDGET,
        t_n: float | None = None,
    ):
        self.design = design
        self.gram = gram if gram is not None else gram_factorize(design)
        self.t_n = default_ridge_threshold(design.n) if t_n is None else float(t_n)
        self.guard_stats = GuardStats()
        # Whitened design: P = T T' with T'T = I_d.
        self.T = sla.solve_triangular(self.gram.chol, design.W.T, lower=True).T
        self._block_cache: dict = {}
        self._cache_lock = threading.Lock()
        n = design.n
        self.full_cached = 2 * n * n * 8 <= cache_budget
        if self.full_cached:
            self.P = self.T @ self.T.T
            self.M = np.eye(n) - self.P
        else:
            self.P = None
            self.M = None
        self.MY = design.Y - self.T @ (self.T.T @ design.Y)
        self.MX = design.X - self.T @ (self.T.T @ design.X)
        self.M_diag = [self.m_block(g, g) for g in range(design.G)]

    # -- block access -------------------------------------------------

    def projection_block(self, g: int, h: int) -> np.ndarray:
        """``P_{g,h} = W_g (W'W)^{-1} W_h'``."""
        d = self.design
        if not (0 <= g < d.G and 0 <= h < d.G):
            raise IndexError("cluster index out of range")
        if self.P is not None:
            return self.P[d.rows(g), d.rows(h)]
        key = (g, h)
        blk = self._block_cache.get(key)
        if blk is None:
            blk = self.T[d.rows(g)] @ self.T[d.rows(h)].T
            with self._cache_lock:
                blk = self._block_cache.setdefault(key, blk)
        return blk

    def m_block(self, g: int, h: int) -> np.ndarray:
        """``M_{g,h} = 1{g=h} I - P_{g,h}``."""
        blk = -self.projection_block(g, h)
        if g == h:
            blk = blk + np.eye(blk.shape[0])
        return blk

    def m_submatrix(self, clusters) -> np.ndarray:
        """Block submatrix of ``M`` for the given cluster tuple, in order."""
        blocks = [[self.m_block(g, h) for h in clusters] for g in clusters]
        return np.block(blocks)

    def residual_parts(self, vec: np.ndarray, clusters) -> np.ndarray:
        """Concatenate per-cluster pieces of a length-n vector."""
        d = self.design
        return np.concatenate([vec[d.rows(g)] for g in clusters])

    def solve_guarded(self, block, rhs):
        return block_solve_guarded(block, rhs, self.t_n, self.guard_stats)


def operator_norm(Q: np.ndarray, tol: float = 1e-13, max_iter: int = 20_000) -> float:
    """Largest singular value of a small block via power iteration.

    The relative-change criterion is driven close to machine precision;
    slow convergence only occurs when the top singular values are nearly
    tied, in which case the error is bounded by their gap.
    """
    Q = np.atleast_2d(Q)
    m = Q.shape[1]
    if Q.size == 0:
        return 0.0
    v = np.ones(m) / math.sqrt(m)
    sigma = 0.0
    for _ in range(max_iter):
        u = Q @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        w = Q.T @ (u / nu)
        sigma_new = np.linalg.norm(w)
        if sigma_new == 0.0:
            return 0.0
        v = w / sigma_new
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            return float(sigma_new)
        sigma = sigma_new
    return float(sigma)


@dataclass
class DiagnosticsReport:
    """Computable counterparts of the regularity-condition quantities."""

    lambda_n: float
    phi_n: float
    min_eig_M_diag: float
    min_eig_M_diag_per_cluster: np.ndarray
    min_eig_S_pairs: float | None
    min_eig_S_triples: float | None
    pairs_checked: int
    pairs_total: int
    pairs_exhaustive: bool
    triples_checked: int
    triples_total: int
    triples_exhaustive: bool

    def violators(self, c: float = 0.01) -> list[int]:
        """Clusters whose ``lambda_min(M_{g,g})`` falls below ``c``."""
        return np.where(self.min_eig_M_diag_per_cluster < c)[0].tolist()

    def to_dict(self) -> dict:
        return {
            "lambda_n": self.lambda_n,
            "phi_n": self.phi_n,
            "min_eig_M_diag": self.min_eig_M_diag,
            "min_eig_M_diag_per_cluster": self.min_eig_M_diag_per_cluster.tolist(),
            "min_eig_S_pairs": self.min_eig_S_pairs,
            "min_eig_S_triples": self.min_eig_S_triples,
            "pairs_checked": self.pairs_checked,
            "pairs_total": self.pairs_total,
            "pairs_exhaustive": self.pairs_exhaustive,
            "triples_checked": self.triples_checked,
            "triples_total": self.triples_total,
            "triples_exhaustive": self.triples_exhaustive,
        }


def _psolve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Least-squares solve; diagnostics must not crash on singular blocks."""
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def _pair_schur(ws: ProjectionWorkspace, k: int, g: int) -> np.ndarray:
    Mgg = ws.m_block(g, g)
    Mkg = ws.m_block(k, g)
    return ws.m_block(k, k) - Mkg @ _psolve(Mgg, Mkg.T)


def _triple_schur(ws: ProjectionWorkspace, k: int, g: int, h: int) -> np.ndarray:
    Mgg_inv_gh = _psolve(ws.m_block(g, g), ws.m_block(g, h))
    Mgg_inv_gk = _psolve(ws.m_block(g, g), ws.m_block(g, k))
    S_kg = ws.m_block(k, k) - ws.m_block(k, g) @ Mgg_inv_gk
    S_hg = ws.m_block(h, h) - ws.m_block(h, g) @ Mgg_inv_gh
    F = ws.m_block(k, h) - ws.m_block(k, g) @ Mgg_inv_gh
    Ft = ws.m_block(h, k) - ws.m_block(h, g) @ Mgg_inv_gk
    return S_kg - F @ _psolve(S_hg, Ft)


def leverage_diagnostics(
    ws: ProjectionWorkspace,
    pair_budget: int = 20_000,
    triple_budget: int = 10_000,
    seed: int = 0,
) -> DiagnosticsReport:
    """Leverage and leave-out feasibility diagnostics.

    Reports ``lambda_n = max_g ||P_{g,g}||_op`` (at most 1),
    ``phi_n = max_g sum_h ||P_{g,h}||_op^2`` (at most ``lambda_n * n_G``),
    the eigenvalue floor of the diagonal annihilator blocks, and eigenvalue
    floors of the pair/triple leave-out Schur complements.  Pairs and
    triples are enumerated exhaustively when their count fits the budget
    and sampled uniformly otherwise.
    """
    G = ws.design.G
    lam_n = 0.0
    phi_n = 0.0
    for g in range(G):
        row = 0.0
        for h in range(G):
            s = operator_norm(ws.projection_block(g, h))
            row += s * s
            if h == g:
                lam_n = max(lam_n, s)
        phi_n = max(phi_n, row)

    m_eigs = np.array([float(np.linalg.eigvalsh(Mgg)[0]) for Mgg in ws.M_diag])

    rng = np.random.default_rng(seed)
    pairs_total = G * (G - 1)
    if pairs_total <= pair_budget:
        pairs = [(k, g) for k in range(G) for g in range(G) if k != g]
        pairs_exhaustive = True
    else:
        pairs = []
        while len(pairs) < pair_budget:
            k, g = rng.integers(0, G, size=2)
            if k != g:
                pairs.append((int(k), int(g)))
        pairs_exhaustive = False
    min_S = None
    for k, g in pairs:
        val = float(np.linalg.eigvalsh(_pair_schur(ws, k, g))[0])
        min_S = val if min_S is None else min(min_S, val)

    triples_total = G * (G - 1) * (G - 2)
    triples: list[tuple[int, int, int]] = []
    if triples_total <= triple_budget:
        triples = [
            (k, g, h)
            for k in range(G)
            for g in range(G)
            for h in range(G)
            if k != g and h != g and k != h
        ]
        triples_exhaustive = True
    else:
        while len(triples) < triple_budget:
            k, g, h = rng.integers(0, G, size=3)
            if k != g and h != g and k != h:
                triples.append((int(k), int(g), int(h)))
        triples_exhaustive = False
    min_S3 = None
    for k, g, h in triples:
        val = float(np.linalg.eigvalsh(_triple_schur(ws, k, g, h))[0])
        min_S3 = val if min_S3 is None else min(min_S3, val)

    return DiagnosticsReport(
        lambda_n=float(lam_n),
        phi_n=float(phi_n),
        min_eig_M_diag=float(m_eigs.min()),
        min_eig_M_diag_per_cluster=m_eigs,
        min_eig_S_pairs=min_S,
        min_eig_S_triples=min_S3,
        pairs_checked=len(pairs),
        pairs_total=pairs_total,
        pairs_exhaustive=pairs_exhaustive,
        triples_checked=len(triples),
        triples_total=triples_total,
        triples_exhaustive=triples_exhaustive,
    )
