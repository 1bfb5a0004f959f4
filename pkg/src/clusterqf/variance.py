"""Leave-out variance estimators and the normal test they feed.

The leave-three-clusters-out estimator is unbiased for the variance of the
point estimator and is the default; the leave-two-clusters-out estimator is
nonnegative, cheaper, and conservative.  A known-covariance formula is
provided as the analytic reference for both.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import _kernels
from .errors import (
    DegenerateClusterWarning,
    SingularLeaveOutError,
    TooFewClustersError,
    ValidationError,
)
from .projection import ProjectionWorkspace
from .quadform import QuadFormEngine, _as_engine


@dataclass
class VarianceEstimate:
    """A variance estimate plus its decomposition and bookkeeping."""

    value: float
    method: str
    components: dict = field(default_factory=dict)
    regularized_solve_count: int = 0
    wall_time: float = 0.0
    flags: list = field(default_factory=list)


@dataclass
class TestResult:
    """Two-sided normal test of ``theta = theta0``."""

    theta_hat: float
    omega_hat: float
    t_stat: float
    p_value: float
    ci: tuple
    alpha: float
    reject: bool
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "omega_hat": self.omega_hat,
            "t": self.t_stat,
            "p": self.p_value,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "reject": self.reject,
            "flags": list(self.flags),
        }


def t_test(theta_hat: float, omega2_hat: float, theta0: float = 0.0,
           alpha: float = 0.05) -> TestResult:
    """Reject when ``|theta_hat - theta0| / omega_hat`` reaches ``z_{1-a/2}``."""
    flags = []
    if omega2_hat <= 0.0:
        flags.append("NonpositiveVariance")
        omega2_hat = np.finfo(np.float64).tiny
    omega = math.sqrt(omega2_hat)
    z = norm.ppf(1.0 - alpha / 2.0)
    t = (theta_hat - theta0) / omega
    p = 2.0 * norm.sf(abs(t))
    return TestResult(
        theta_hat=float(theta_hat),
        omega_hat=float(omega),
        t_stat=float(t),
        p_value=float(p),
        ci=(float(theta_hat - z * omega), float(theta_hat + z * omega)),
        alpha=float(alpha),
        reject=bool(abs(t) >= z),
        flags=flags,
    )


def mtilde(ws: ProjectionWorkspace, g: int, k: int, leave: tuple) -> np.ndarray:
    """Partialled annihilator block ``Mt_{g,k,-gh}`` used by the triple terms.

    ``(M_{g,g} - M_{g,h} M_{h,h}^{-1} M_{h,g})^{-1}
    (M_{g,k} - M_{g,h} M_{h,h}^{-1} M_{h,k})``
    for ``leave = (g, h)``; equals the identity at ``k = g`` and vanishes at
    ``k = h``.
    """
    pair = sorted(set(int(s) for s in leave))
    if len(pair) != 2 or int(g) not in pair:
        raise ValidationError("leave must contain g and exactly one other cluster")
    h = pair[0] if pair[1] == int(g) else pair[1]
    ng = int(ws.design.cluster_sizes[g])
    nk = int(ws.design.cluster_sizes[k])
    if k == g:
        return np.eye(ng)
    if k == h:
        return np.zeros((ng, nk))
    Q, _ = ws.solve_guarded(
        ws.m_block(h, h), np.hstack([ws.m_block(h, g), ws.m_block(h, k)])
    )
    Mgh = ws.m_block(g, h)
    lead = ws.m_block(g, g) - Mgh @ Q[:, :ng]
    rhs = ws.m_block(g, k) - Mgh @ Q[:, ng:]
    sol, _ = ws.solve_guarded(0.5 * (lead + lead.T), rhs)
    return sol


@dataclass
class L3Terms:
    """Raw accumulations of the five triple-sum terms."""

    terms: np.ndarray  # length 5
    reg_pair: int
    reg_triple: int
    wall_time: float

    @property
    def value(self) -> float:
        t = self.terms
        return float(t[0] + 2.0 * t[1] + t[2] - (t[3] + t[4]))

    @property
    def tilde1(self) -> float:
        t = self.terms
        return float(t[0] + 2.0 * t[1] + t[2] - 2.0 * (t[3] + t[4]))

    @property
    def tilde2(self) -> float:
        return float(self.terms[3] + self.terms[4])


def _segment_products(B, starts, X, Y):
    """Precompute SXY, VVT, UUT for the kernels.

    ``SXY[h,g] = X_h' B_{h,g} Y_g``; ``VVT[k,g0+j] = (B_{k,g}' X_k)_j``;
    ``UUT[k,g0+j] = (B_{g,k} Y_k)_j``.
    """
    idx = starts[:-1]
    VVT = np.add.reduceat(B * X[:, None], idx, axis=0)
    UUT = np.add.reduceat(B * Y[None, :], idx, axis=1).T
    SXY = np.add.reduceat(VVT * Y[None, :], idx, axis=1)
    return (np.ascontiguousarray(SXY), np.ascontiguousarray(VVT),
            np.ascontiguousarray(UUT))


def _kernel_data(engine: QuadFormEngine, X=None, Y=None):
    ws = engine.ws
    d = ws.design
    X, Y = engine._xy(X, Y)
    MY = ws.MY if Y is d.Y else engine.annihilate(Y)
    MX = ws.MX if X is d.X else engine.annihilate(X)
    SXY, VV, UU = _segment_products(engine.B, d.starts, X, Y)
    return X, Y, MX, MY, SXY, VV, UU


def l3co_terms(engine: QuadFormEngine, X=None, Y=None) -> L3Terms:
    """Run the triple-sum kernel once and return the five raw terms."""
    ws = engine.ws
    d = ws.design
    if d.G < 2:
        raise TooFewClustersError(
            "the leave-three-clusters-out estimator needs at least 2 clusters"
        )
    if d.G == 2:
        warnings.warn(
            "G = 2: triple sums degenerate to pair terms and the asymptotics "
            "do not apply",
            DegenerateClusterWarning,
            stacklevel=3,
        )
    use_cache = X is None and Y is None
    cached = getattr(engine, "_l3co_cache", None)
    if use_cache and cached is not None:
        return cached
    Xv, Yv, MX, MY, SXY, VV, UU = _kernel_data(engine, X, Y)
    t0 = time.perf_counter()
    partials, reg_pair, reg_triple = _kernels.l3co_kernel(
        ws.M, ws.P, engine.B, d.starts, MY, MX, Xv, Yv, SXY, VV, UU, ws.t_n
    )
    out = L3Terms(
        terms=np.sum(partials, axis=0),
        reg_pair=int(reg_pair),
        reg_triple=int(reg_triple),
        wall_time=time.perf_counter() - t0,
    )
    if (reg_pair or reg_triple) and engine.strict:
        raise SingularLeaveOutError(
            f"{reg_pair + reg_triple} ridge-guarded solve(s) fired inside the "
            "variance terms in strict mode"
        )
    if use_cache:
        engine._l3co_cache = out
    return out


def _estimate_from_terms(t: L3Terms, nonneg: bool) -> VarianceEstimate:
    flags = []
    if t.reg_pair or t.reg_triple:
        flags.append("RegularizedSolves")
    if nonneg:
        value = abs(t.tilde1) + abs(t.tilde2)
        method = "L3CO_NONNEG"
    else:
        value = t.value
        method = "L3CO"
    return VarianceEstimate(
        value=float(value),
        method=method,
        components={
            "term1": float(t.terms[0]),
            "term2": float(t.terms[1]),
            "term3": float(t.terms[2]),
            "term4": float(t.terms[3]),
            "term5": float(t.terms[4]),
            "tilde1": t.tilde1,
            "tilde2": t.tilde2,
        },
        regularized_solve_count=t.reg_pair + t.reg_triple,
        wall_time=t.wall_time,
        flags=flags,
    )


def l3co_variance(design, A0=None, X=None, Y=None) -> VarianceEstimate:
    """Unbiased leave-three-clusters-out variance of the point estimator."""
    engine = _as_engine(design, A0)
    return _estimate_from_terms(l3co_terms(engine, X, Y), nonneg=False)


def l3co_variance_nonneg(design, A0=None, X=None, Y=None) -> VarianceEstimate:
    """Nonnegative variant ``|tilde1| + |tilde2|`` from the same pass."""
    engine = _as_engine(design, A0)
    return _estimate_from_terms(l3co_terms(engine, X, Y), nonneg=True)


def l2co_variance(design, A0=None, X=None, Y=None) -> VarianceEstimate:
    """Conservative leave-two-clusters-out variance (a sum of squares)."""
    engine = _as_engine(design, A0)
    ws = engine.ws
    d = ws.design
    if d.G < 2:
        raise TooFewClustersError(
            "the leave-two-clusters-out estimator needs at least 2 clusters"
        )
    if d.G == 2:
        warnings.warn(
            "G = 2: leave-two-out inference has no asymptotic backing",
            DegenerateClusterWarning,
            stacklevel=2,
        )
    Xv, Yv, MX, MY, SXY, VV, UU = _kernel_data(engine, X, Y)
    t0 = time.perf_counter()
    inner, nreg = _kernels.l2co_kernel(ws.M, d.starts, MY, MX, VV, UU, ws.t_n)
    value = float(np.sum(inner * inner))
    if nreg and engine.strict:
        raise SingularLeaveOutError(
            f"{nreg} ridge-guarded pair solve(s) fired in strict mode"
        )
    return VarianceEstimate(
        value=value,
        method="L2CO",
        components={"inner_sums": inner},
        regularized_solve_count=int(nreg),
        wall_time=time.perf_counter() - t0,
        flags=["RegularizedSolves"] if nreg else [],
    )


def split_omega_blocks(Omega_blocks, sizes):
    """Split per-cluster ``2 n_g x 2 n_g`` covariances into (UU, UV, VV) parts."""
    out = []
    for g, blk in enumerate(Omega_blocks):
        ng = int(sizes[g])
        blk = np.asarray(blk, dtype=np.float64)
        if blk.shape != (2 * ng, 2 * ng):
            raise ValidationError(
                f"covariance block {g} must be {2 * ng} x {2 * ng}, "
                f"got {blk.shape}"
            )
        out.append((blk[:ng, :ng], blk[:ng, ng:], blk[ng:, ng:]))
    return out


def oracle_omega(design, A0, Omega_blocks, Pi, Gamma) -> float:
    """Exact variance of the point estimator under a known error covariance.

    ``Omega_blocks[g]`` is the ``2 n_g x 2 n_g`` covariance of the stacked
    cluster errors ``(U_g, V_g)``; ``Pi = W pi`` and ``Gamma = W gamma`` are
    the signal vectors.
    """
    engine = _as_engine(design, A0)
    d = engine.ws.design
    Pi = np.asarray(Pi, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    if Pi.shape != (d.n,) or Gamma.shape != (d.n,):
        raise ValidationError("Pi and Gamma must be length-n signal vectors")
    if len(Omega_blocks) != d.G:
        raise ValidationError("need one covariance block per cluster")
    parts = split_omega_blocks(Omega_blocks, d.cluster_sizes)
    B = engine.B
    H = B.T @ Pi
    Ht = B @ Gamma
    total = 0.0
    for g in range(d.G):
        rg = d.rows(g)
        OUg, OUVg, OVg = parts[g]
        total += H[rg] @ OUg @ H[rg]
        total += Ht[rg] @ OVg @ Ht[rg]
        total += 2.0 * H[rg] @ OUVg @ Ht[rg]
        for h in range(d.G):
            rh = d.rows(h)
            Bgh = B[rg, rh]
            OUh, OUVh, _ = parts[h]
            total += np.trace(OVg @ Bgh @ OUh @ Bgh.T)
            total += np.trace(OUVg @ Bgh @ OUVh @ B[rh, rg])
    return float(total)
