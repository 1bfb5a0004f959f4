"""Point estimation of the quadratic form ``theta = pi' A0 gamma``.

Implements the plug-in estimator, the leave-cluster-out estimator computed
as a bias-corrected plug-in, the minimum-norm bias corrections, and the
leave-out coefficient/residual machinery shared with the variance module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .design import ClusteredDesign
from .errors import (
    DoesNotExistError,
    RankDeficientError,
    RegularizedSolveWarning,
    SingularLeaveOutError,
    TooLargeError,
    ValidationError,
)
from .projection import GramFactor, ProjectionWorkspace, gram_factorize

KR_MAX_SYSTEM_DIM = 4_000_000  # refuse to assemble the Khatri-Rao system past this


@dataclass(frozen=True)
class QuadFormTarget:
    """The matrix ``A0`` defining ``theta = pi' A0 gamma``.

    Stored either dense (``d x d``) or as a low-rank factor pair with
    ``A0 = left @ right.T``; restriction and IV targets are low rank, so the
    factored form avoids ``O(d^2)`` storage.
    """

    dense: np.ndarray | None = None
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    symmetric: bool = False

    @classmethod
    def from_dense(cls, A0: np.ndarray) -> "QuadFormTarget":
        A0 = np.asarray(A0, dtype=np.float64)
        if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
            raise ValidationError("A0 must be a square matrix")
        sym = bool(np.allclose(A0, A0.T, rtol=1e-12, atol=1e-12))
        return cls(dense=A0, symmetric=sym)

    @classmethod
    def from_factors(cls, left: np.ndarray, right: np.ndarray | None = None) -> "QuadFormTarget":
        left = np.atleast_2d(np.asarray(left, dtype=np.float64))
        sym = right is None
        right = left if right is None else np.atleast_2d(np.asarray(right, dtype=np.float64))
        if left.shape != right.shape:
            raise ValidationError("factor matrices must share a shape (d x r)")
        return cls(left=left, right=right, symmetric=sym)

    @property
    def d(self) -> int:
        return self.dense.shape[0] if self.dense is not None else self.left.shape[0]

    def materialize(self) -> np.ndarray:
        return self.dense if self.dense is not None else self.left @ self.right.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``A0 @ v`` without materializing the dense form."""
        if self.dense is not None:
            return self.dense @ v
        return self.left @ (self.right.T @ v)

    def scaled(self, c: float) -> "QuadFormTarget":
        if self.dense is not None:
            return QuadFormTarget(dense=c * self.dense, symmetric=self.symmetric)
        return QuadFormTarget(left=c * self.left, right=self.right,
                              symmetric=self.symmetric)


@dataclass
class LeaveOutResiduals:
    """Leave-out residual blocks for a target cluster ``g``."""

    g: int
    left_out: tuple
    Ytilde: np.ndarray
    Xtilde: np.ndarray
    regularized: bool


class QuadFormEngine:
    """Precomputed estimator state for one design and one target.

    Holds the full ``A`` and ``B = A - M Bdiag(M_{g,g}^{-1} A_{g,g})``
    matrices plus the per-cluster correction blocks.  All point and
    variance estimators can be re-evaluated at alternative outcome
    vectors (same design) through the ``X=``/``Y=`` overrides, which is
    what the IV beta grid and the exact-expectation tests rely on.
    """

    def __init__(
        self,
        workspace: ProjectionWorkspace,
        target: QuadFormTarget,
        strict: bool = False,
    ):
        if not workspace.full_cached:
            raise TooLargeError(
                "quadratic-form estimation requires the materialized block "
                "cache; raise the workspace cache budget"
            )
        self.ws = workspace
        self.target = target
        self.strict = strict
        if target.d != workspace.design.d:
            raise ValidationError(
                f"A0 is {target.d} x {target.d} but the design has d={workspace.design.d}"
            )
        self.guard_count = 0

    # -- target in whitened coordinates --------------------------------

    @cached_property
    def _whitened_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """(KL, KR) with ``K^{-1} A0 K^{-T} = KL @ KR.T``."""
        K = self.ws.gram.chol
        if self.target.dense is not None:
            KA = sla.solve_triangular(K, self.target.dense, lower=True)
            At0 = sla.solve_triangular(K, KA.T, lower=True).T
            return At0, np.eye(self.target.d)
        KL = sla.solve_triangular(K, self.target.left, lower=True)
        KR = sla.solve_triangular(K, self.target.right, lower=True)
        return KL, KR

    @cached_property
    def h_n(self) -> float:
        """Operator norm of the whitened target (scale diagnostic)."""
        KL, KR = self._whitened_factors
        q1, r1 = np.linalg.qr(KL)
        q2, r2 = np.linalg.qr(KR)
        svals = np.linalg.svd(r1 @ r2.T, compute_uv=False)
        return float(svals[0]) if svals.size else 0.0

    @cached_property
    def r_n(self) -> int:
        """Numerical rank of the induced ``n x n`` matrix ``A``."""
        KL, KR = self._whitened_factors
        _, r1 = np.linalg.qr(KL)
        _, r2 = np.linalg.qr(KR)
        svals = np.linalg.svd(r1 @ r2.T, compute_uv=False)
        if svals.size == 0 or svals[0] == 0.0:
            return 0
        tol = svals[0] * max(r1.shape) * np.finfo(np.float64).eps
        return int((svals > tol).sum())

    @cached_property
    def kappa_n(self) -> float:
        hn = self.h_n
        if hn == 0.0:
            return 0.0
        return float(np.sum(self.B * self.B)) / hn**2

    # -- induced matrices ----------------------------------------------

    @cached_property
    def A(self) -> np.ndarray:
        """``A = W (W'W)^{-1} A0 (W'W)^{-1} W'``."""
        KL, KR = self._whitened_factors
        return (self.ws.T @ KL) @ (self.ws.T @ KR).T

    @cached_property
    def correction_blocks(self) -> list[np.ndarray]:
        """Per-cluster blocks ``M_{g,g}^{-1} A_{g,g}`` (ridge-guarded).

        When a guard fires, the diagonal blocks of ``A - M D`` no longer
        cancel exactly; the leftovers are kept in ``_diag_leftover`` so the
        point estimator stays consistent with the zero-diagonal ``B`` that
        the variance estimators integrate against.
        """
        d = self.ws.design
        out = []
        leftover: list[np.ndarray | None] = []
        fired = 0
        for g in range(d.G):
            Agg = self.A[d.rows(g), d.rows(g)]
            sol, reg = self.ws.solve_guarded(self.ws.M_diag[g], Agg)
            fired += int(reg)
            out.append(sol)
            leftover.append(Agg - self.ws.M_diag[g] @ sol if reg else None)
        self._diag_leftover = leftover
        if fired:
            self.guard_count += fired
            if self.strict:
                raise SingularLeaveOutError(
                    f"{fired} diagonal annihilator block(s) below the ridge "
                    "threshold in strict mode"
                )
            warnings.warn(
                f"ridge guard engaged on {fired} diagonal block(s); leave-out "
                "estimate is approximate",
                RegularizedSolveWarning,
                stacklevel=3,
            )
        return out

    @cached_property
    def B(self) -> np.ndarray:
        """``B = A - M Bdiag(M_{g,g}^{-1} A_{g,g})``; diagonal blocks zero."""
        d = self.ws.design
        B = self.A.copy()
        for g in range(d.G):
            B[:, d.rows(g)] -= self.ws.M[:, d.rows(g)] @ self.correction_blocks[g]
            B[d.rows(g), d.rows(g)] = 0.0
        return B

    # -- data plumbing ---------------------------------------------------

    def _xy(self, X=None, Y=None) -> tuple[np.ndarray, np.ndarray]:
        d = self.ws.design
        X = d.X if X is None else np.asarray(X, dtype=np.float64)
        Y = d.Y if Y is None else np.asarray(Y, dtype=np.float64)
        return X, Y

    def annihilate(self, v: np.ndarray) -> np.ndarray:
        """``M v`` through the whitened factor."""
        T = self.ws.T
        return v - T @ (T.T @ v)

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        """OLS coefficient of ``v`` on ``W``."""
        return self.ws.gram.solve(self.ws.design.W.T @ v)

    # -- point estimators -------------------------------------------------

    def theta_plugin(self, X=None, Y=None) -> float:
        X, Y = self._xy(X, Y)
        pi_hat = self.coefficients(X)
        gamma_hat = self.coefficients(Y)
        return float(pi_hat @ self.target.apply(gamma_hat))

    def leaveout_terms(self, X=None, Y=None) -> np.ndarray:
        """Per-cluster bias-correction terms ``(MX)_g' M_{g,g}^{-1} A_{g,g} Y_g``.

        Includes the diagonal leftover of any ridge-guarded block, keeping
        the total equal to ``X' B Y`` for the zero-diagonal ``B``.
        """
        X, Y = self._xy(X, Y)
        d = self.ws.design
        MX = self.ws.MX if X is d.X else self.annihilate(X)
        blocks = self.correction_blocks
        vals = np.empty(d.G)
        for g in range(d.G):
            r = d.rows(g)
            vals[g] = MX[r] @ (blocks[g] @ Y[r])
            left = self._diag_leftover[g]
            if left is not None:
                vals[g] += X[r] @ (left @ Y[r])
        return vals

    def theta_leaveout(self, X=None, Y=None) -> float:
        """Leave-one-cluster-out estimator ``X' B Y`` (unbiased)."""
        return self.theta_plugin(X, Y) - float(np.sum(self.leaveout_terms(X, Y)))

    def theta_leaveout_dual(self, X=None, Y=None) -> float:
        """Leave-out OLS form ``sum_g pihat_{-g}' A0 (W'W)^{-1} W_g' Y_g``.

        Slower than :meth:`theta_leaveout`; kept as the second computational
        route for the dual-form identity.
        """
        X, Y = self._xy(X, Y)
        d = self.ws.design
        pi_hat = self.coefficients(X)
        MX = self.ws.MX if X is d.X else self.annihilate(X)
        total = 0.0
        for g in range(d.G):
            r = d.rows(g)
            Wg = d.W[r]
            corr, _ = self.ws.solve_guarded(self.ws.M_diag[g], MX[r])
            pi_g = pi_hat - self.ws.gram.solve(Wg.T @ corr)
            total += pi_g @ self.target.apply(self.ws.gram.solve(Wg.T @ Y[r]))
        return float(total)


# -- module-level operation surface ---------------------------------------


def _as_engine(design_or_ws, A0, strict: bool = False) -> QuadFormEngine:
    if isinstance(design_or_ws, QuadFormEngine):
        return design_or_ws
    if isinstance(design_or_ws, ProjectionWorkspace):
        ws = design_or_ws
    else:
        ws = ProjectionWorkspace(design_or_ws)
    target = A0 if isinstance(A0, QuadFormTarget) else QuadFormTarget.from_dense(A0)
    return QuadFormEngine(ws, target, strict=strict)


def theta_plugin(design, A0) -> float:
    """Plug-in estimator ``pihat' A0 gammahat``."""
    return _as_engine(design, A0).theta_plugin()


def theta_leaveout(design, A0, strict: bool = False) -> float:
    """Leave-one-cluster-out estimator of ``pi' A0 gamma``."""
    return _as_engine(design, A0, strict=strict).theta_leaveout()


def leaveout_coeffs(ws_or_design, S) -> tuple[np.ndarray, np.ndarray]:
    """OLS coefficients ``(gammahat_{-S}, pihat_{-S})`` excluding clusters ``S``.

    Reference implementation via the reduced Gram matrix; duplicates in
    ``S`` collapse to the set union.
    """
    ws = ws_or_design if isinstance(ws_or_design, ProjectionWorkspace) \
        else ProjectionWorkspace(ws_or_design)
    d = ws.design
    left = sorted(set(int(s) for s in S))
    if any(s < 0 or s >= d.G for s in left):
        raise IndexError("cluster index out of range")
    if len(left) == d.G:
        raise ValidationError("cannot leave out every cluster")
    S_red = ws.gram.S.copy()
    WtY = d.W.T @ d.Y
    WtX = d.W.T @ d.X
    for g in left:
        r = d.rows(g)
        Wg = d.W[r]
        S_red -= Wg.T @ Wg
        WtY -= Wg.T @ d.Y[r]
        WtX -= Wg.T @ d.X[r]
    try:
        c, low = sla.cho_factor(0.5 * (S_red + S_red.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(
            f"reduced Gram matrix is singular after leaving out clusters {left}"
        ) from exc
    return sla.cho_solve((c, low), WtY), sla.cho_solve((c, low), WtX)


def leaveout_residuals(ws_or_design, g: int, S) -> LeaveOutResiduals:
    """Leave-out residual blocks via the annihilator block solve.

    ``Ytilde_{g,-S} = [M_{S,S}^{-1} (MY)_S]_g`` with the ridge guard of the
    workspace; members of ``S`` collapse to the set union including ``g``.
    """
    ws = ws_or_design if isinstance(ws_or_design, ProjectionWorkspace) \
        else ProjectionWorkspace(ws_or_design)
    d = ws.design
    left = sorted(set(int(s) for s in S) | {int(g)})
    M_SS = ws.m_submatrix(left)
    rhs = np.column_stack([
        ws.residual_parts(ws.MY, left),
        ws.residual_parts(ws.MX, left),
    ])
    sol, reg = ws.solve_guarded(M_SS, rhs)
    pos = left.index(int(g))
    off = int(sum(d.cluster_sizes[c] for c in left[:pos]))
    ng = int(d.cluster_sizes[int(g)])
    return LeaveOutResiduals(
        g=int(g), left_out=tuple(left),
        Ytilde=sol[off:off + ng, 0].copy(),
        Xtilde=sol[off:off + ng, 1].copy(),
        regularized=reg,
    )


# -- bias corrections -------------------------------------------------------


class BlockCorrection:
    """Bias-correction matrix exposed per cluster block."""

    def __init__(self, full: np.ndarray, design: ClusteredDesign, label: str):
        self._full = full
        self._design = design
        self.label = label

    def block(self, g: int, h: int) -> np.ndarray:
        d = self._design
        return self._full[d.rows(g), d.rows(h)]

    def full(self) -> np.ndarray:
        return self._full

    @property
    def trace_cc(self) -> float:
        """``tr(C'C)``, the squared Frobenius norm."""
        return float(np.sum(self._full * self._full))


def bias_correction_LO(design, A0) -> BlockCorrection:
    """Minimum-norm correction invariant to the signal in one regression.

    ``C_LO = M Bdiag(M_{g,g}^{-1} A_{g,g})``; its diagonal blocks equal
    ``A_{g,g}`` and ``W' C_LO = 0``.
    """
    eng = _as_engine(design, A0)
    d = eng.ws.design
    C = np.zeros((d.n, d.n))
    for g in range(d.G):
        C[:, d.rows(g)] = eng.ws.M[:, d.rows(g)] @ eng.correction_blocks[g]
    return BlockCorrection(C, d, "LO")


def khatri_rao_system(ws: ProjectionWorkspace) -> np.ndarray:
    """Assemble the blockwise system matrix with blocks ``M_{g,h} (x) M_{g,h}``."""
    d = ws.design
    sizes2 = (d.cluster_sizes.astype(np.int64)) ** 2
    dim = int(sizes2.sum())
    offs = np.zeros(d.G + 1, dtype=np.int64)
    np.cumsum(sizes2, out=offs[1:])
    Kmat = np.empty((dim, dim))
    for g in range(d.G):
        for h in range(d.G):
            Kmat[offs[g]:offs[g + 1], offs[h]:offs[h + 1]] = np.kron(
                ws.m_block(g, h), ws.m_block(g, h))
    return Kmat


def bias_correction_KR(
    design,
    A0,
    cond_limit: float = 1e12,
    max_system_dim: int = KR_MAX_SYSTEM_DIM,
) -> tuple[BlockCorrection, float]:
    """Minimum-norm correction invariant to the signal in both regressions.

    Solves the blockwise linear system ``bvec(A) = (M * M) bvec(Lambda)``
    (Khatri-Rao blocks) and returns ``C_KR = M Bdiag(Lambda) M`` together
    with the system's condition estimate.

    Raises
    ------
    DoesNotExistError
        When the system is numerically singular (condition beyond
        ``cond_limit``), mirroring the known non-existence cases.
    TooLargeError
        When the system dimension exceeds ``max_system_dim``.
    """
    eng = _as_engine(design, A0)
    ws = eng.ws
    d = ws.design
    sizes2 = (d.cluster_sizes.astype(np.int64)) ** 2
    dim = int(sizes2.sum())
    if dim > max_system_dim:
        raise TooLargeError(
            f"Khatri-Rao system dimension {dim} exceeds the budget "
            f"{max_system_dim}; use the leave-out correction instead"
        )
    offs = np.zeros(d.G + 1, dtype=np.int64)
    np.cumsum(sizes2, out=offs[1:])
    try:
        Kmat = khatri_rao_system(ws)
    except MemoryError as exc:
        raise TooLargeError("Khatri-Rao system does not fit in memory") from exc
    rhs = np.concatenate([
        eng.A[d.rows(g), d.rows(g)].ravel() for g in range(d.G)
    ])
    svals = np.linalg.svd(Kmat, compute_uv=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if not np.isfinite(cond) or cond > cond_limit:
        raise DoesNotExistError(
            f"Khatri-Rao system is numerically singular (cond ~ {cond:.3e}); "
            "the doubly-invariant correction does not exist for this design"
        )
    lam = np.linalg.solve(Kmat, rhs)
    C = np.zeros((d.n, d.n))
    for g in range(d.G):
        ng = int(d.cluster_sizes[g])
        Lgg = lam[offs[g]:offs[g + 1]].reshape(ng, ng)
        C[:, d.rows(g)] = ws.M[:, d.rows(g)] @ Lgg
    C = C @ ws.M
    return BlockCorrection(C, d, "KR"), cond


def theta_KR(design, A0) -> float:
    """Doubly-invariant bias-corrected estimator ``X'(A - C_KR)Y``."""
    eng = _as_engine(design, A0)
    C, _ = bias_correction_KR(eng, A0)
    d = eng.ws.design
    return float(d.X @ (eng.A - C.full()) @ d.Y)
