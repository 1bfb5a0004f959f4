"""Builders mapping the three applications onto quadratic-form inference.

Instrumental variables with many instruments/controls, variance components
of two-way fixed effect models, and tests of many linear restrictions all
reduce to a ``(design, A0, theta0)`` triple; the wrappers here construct
those triples and run the tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .design import ClusteredDesign, build_design
from .errors import (
    DivideByZeroError,
    RankDeficientError,
    ValidationError,
    WeakIdentificationWarning,
)
from .projection import ProjectionWorkspace
from .quadform import QuadFormEngine, QuadFormTarget
from .variance import TestResult, l3co_terms, t_test
from . import variance as _var


def _variance_value(engine, method: str, Y: np.ndarray, X=None) -> tuple[float, list]:
    """Dispatch a variance method; falls back to the nonnegative variant
    when either component of the linear/quadratic split is negative.

    A negative split component means the raw alternating sum is a
    cancellation artifact (it can even stay barely positive while both
    halves are wild); the nonnegative recombination of the same pass is
    consistent and equals the raw value whenever both halves are sane.
    """
    flags = []
    if method in ("l3co", "l3co_nonneg"):
        t = l3co_terms(engine, X=X, Y=Y)
        if t.reg_pair or t.reg_triple:
            flags.append("RegularizedSolves")
        if method == "l3co":
            val = t.value
            if t.tilde1 < 0.0 or t.tilde2 < 0.0:
                flags.append("NegativeL3COComponent:UsedNonnegVariant")
                val = abs(t.tilde1) + abs(t.tilde2)
        else:
            val = abs(t.tilde1) + abs(t.tilde2)
        return val, flags
    if method == "l2co":
        est = _var.l2co_variance(engine, X=X, Y=Y)
        return est.value, est.flags
    raise ValidationError(f"unknown variance method {method!r}")


class IVProblem:
    """An IV regression with clustered data, many instruments and controls.

    The stacked regressor matrix is ``W = [controls, instruments]``; the
    quadratic-form target projects onto the instruments after partialling
    out the controls, so testing ``beta = beta0`` is testing that the
    target form vanishes at the treatment-adjusted outcome.
    """

    def __init__(self, cluster, outcome, treatment, instruments, controls=None):
        outcome = np.asarray(outcome, dtype=np.float64).ravel()
        treatment = np.asarray(treatment, dtype=np.float64).ravel()
        Z = np.atleast_2d(np.asarray(instruments, dtype=np.float64))
        if Z.shape[0] != outcome.shape[0]:
            Z = Z.T
        if controls is None:
            Wc = np.empty((outcome.shape[0], 0))
        else:
            Wc = np.atleast_2d(np.asarray(controls, dtype=np.float64))
            if Wc.shape[0] != outcome.shape[0]:
                Wc = Wc.T
        self.d_z = Z.shape[1]
        self.d_w = Wc.shape[1]
        W = np.hstack([Wc, Z])
        # Design reordered cluster-major; outcome rides along as Y.
        self.design = build_design(cluster, outcome, treatment, W)
        self.outcome = self.design.Y
        self.treatment = self.design.X

    @property
    def instrument_cols(self) -> slice:
        return slice(self.d_w, self.d_w + self.d_z)

    @cached_property
    def workspace(self) -> ProjectionWorkspace:
        return ProjectionWorkspace(self.design)

    @cached_property
    def target(self) -> QuadFormTarget:
        """Factored ``A0 = W' P_{Ztilde} W`` without any n x n intermediate."""
        W = self.design.W
        Wc = W[:, : self.d_w]
        Z = W[:, self.instrument_cols]
        if self.d_w:
            Swc = Wc.T @ Wc
            try:
                c, low = sla.cho_factor(Swc, lower=True)
            except np.linalg.LinAlgError as exc:
                raise RankDeficientError("controls are collinear") from exc
            Zt = Z - Wc @ sla.cho_solve((c, low), Wc.T @ Z)
        else:
            Zt = Z
        Szz = Zt.T @ Zt
        try:
            G = np.linalg.cholesky(Szz)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError(
                "instruments are collinear with the controls"
            ) from exc
        L = sla.solve_triangular(G, Zt.T @ W, lower=True).T
        return QuadFormTarget.from_factors(L)

    @cached_property
    def engine(self) -> QuadFormEngine:
        return QuadFormEngine(self.workspace, self.target)

    def adjusted_outcome(self, beta0: float) -> np.ndarray:
        return self.outcome - beta0 * self.treatment

    @cached_property
    def xbx(self) -> float:
        """Leave-out estimate of the concentration ``X' B X``."""
        return self.engine.theta_leaveout(Y=self.treatment)

    @cached_property
    def xby(self) -> float:
        return self.engine.theta_leaveout(Y=self.outcome)


def iv_lm_test(problem: IVProblem, beta0: float, alpha: float = 0.05,
               variance_method: str = "l3co") -> TestResult:
    """Weak-identification-robust test of ``beta = beta0``.

    Imposes the null on the outcome, so the variance is evaluated at the
    hypothesized value; the resulting statistic is the Lagrange-multiplier
    form of the test.
    """
    Y = problem.adjusted_outcome(beta0)
    theta = problem.xby - beta0 * problem.xbx
    omega2, flags = _variance_value(problem.engine, variance_method, Y)
    res = t_test(theta, omega2, theta0=0.0, alpha=alpha)
    res.flags.extend(flags)
    return res


@dataclass
class IVPointEstimate:
    """Leave-out (jackknife-style) IV point estimate with a Wald test."""

    beta_hat: float
    xbx: float
    omega2: float
    alpha: float = 0.05
    flags: list = field(default_factory=list)

    @property
    def std_error(self) -> float:
        return math.sqrt(max(self.omega2, np.finfo(np.float64).tiny)) / abs(self.xbx)

    def wald(self, beta0: float, alpha: float | None = None) -> TestResult:
        """Test ``beta = beta0`` with the variance held at ``beta_hat``."""
        alpha = self.alpha if alpha is None else alpha
        res = t_test(self.beta_hat, self.std_error**2, theta0=beta0, alpha=alpha)
        res.flags.extend(self.flags)
        return res


def iv_point_estimate(problem: IVProblem, alpha: float = 0.05,
                      variance_method: str = "l3co") -> IVPointEstimate:
    """Ratio estimator ``X'B outcome / X'B treatment`` plus its Wald test.

    Warns when the denominator is within two of its own (conservative)
    standard errors of zero; in that regime the confidence set from
    :func:`iv_confidence_set` is the reliable summary.
    """
    den = problem.xbx
    if den == 0.0:
        raise DivideByZeroError("X' B X is exactly zero; beta is not identified")
    flags = []
    den_var = _var.l2co_variance(problem.engine, Y=problem.treatment).value
    if abs(den) < 2.0 * math.sqrt(max(den_var, 0.0)):
        warnings.warn(
            "denominator X'BX is small relative to its sampling noise; "
            "the point estimate is unreliable (weak identification)",
            WeakIdentificationWarning,
            stacklevel=2,
        )
        flags.append("WeakIdentification")
    beta_hat = problem.xby / den
    omega2, vflags = _variance_value(
        problem.engine, variance_method, problem.adjusted_outcome(beta_hat))
    return IVPointEstimate(beta_hat=float(beta_hat), xbx=float(den),
                           omega2=float(omega2), alpha=alpha,
                           flags=flags + vflags)


@dataclass
class ConfidenceSet:
    """Test-inversion confidence set over a finite grid of beta values."""

    intervals: list
    grid: np.ndarray
    accepted: np.ndarray
    unbounded_low: bool
    unbounded_high: bool

    @property
    def empty(self) -> bool:
        return len(self.intervals) == 0


class _BetaQuadratics:
    """Exact quadratic coefficients, in beta0, of the variance estimators.

    Every leave-out variance term is a polynomial of degree two in the
    null value entering ``Y = outcome - beta0 * treatment``, so three
    kernel evaluations pin the whole curve down exactly.
    """

    def __init__(self, problem: IVProblem, nodes: np.ndarray | None = None):
        self.problem = problem
        if nodes is None:
            center = 0.0
            scale = 1.0
            nodes = np.array([center - scale, center, center + scale])
        self.nodes = nodes
        tilde1 = np.empty(3)
        tilde2 = np.empty(3)
        l2 = np.empty(3)
        for i, b in enumerate(nodes):
            Y = problem.adjusted_outcome(b)
            t = l3co_terms(problem.engine, Y=Y)
            tilde1[i] = t.tilde1
            tilde2[i] = t.tilde2
            l2[i] = _var.l2co_variance(problem.engine, Y=Y).value
        self.c_tilde1 = self._fit(nodes, tilde1)
        self.c_tilde2 = self._fit(nodes, tilde2)
        self.c_l2co = self._fit(nodes, l2)

    @staticmethod
    def _fit(x, y):
        V = np.vander(x, 3, increasing=True)
        return np.linalg.solve(V, y)

    @staticmethod
    def _eval(c, b):
        return c[0] + c[1] * b + c[2] * b * b

    def omega2(self, beta0, method: str):
        t1 = self._eval(self.c_tilde1, beta0)
        t2 = self._eval(self.c_tilde2, beta0)
        if method == "l2co":
            return self._eval(self.c_l2co, beta0)
        if method == "l3co_nonneg":
            return np.abs(t1) + np.abs(t2)
        # negative split components fall back to the nonnegative variant
        return np.where(np.minimum(t1, t2) >= 0.0, t1 + t2,
                        np.abs(t1) + np.abs(t2))


def iv_confidence_set(problem: IVProblem, alpha: float = 0.05,
                      grid=None, variance_method: str = "l3co") -> ConfidenceSet:
    """Invert the null-imposed test over a grid of beta values.

    ``grid`` is either an explicit array or a ``(lo, hi, steps)`` triple;
    by default it spans the point estimate plus/minus ten standard errors
    with 401 points.  The returned set is a union of maximal intervals and
    may be empty or flagged unbounded at either grid edge.
    """
    if grid is None:
        pt = iv_point_estimate(problem, alpha, variance_method)
        half = 10.0 * pt.std_error
        grid = np.linspace(pt.beta_hat - half, pt.beta_hat + half, 401)
    elif isinstance(grid, tuple):
        lo, hi, steps = grid
        grid = np.linspace(lo, hi, int(steps))
    else:
        grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        return ConfidenceSet([], grid, np.zeros(0, dtype=bool), False, False)

    from scipy.stats import norm

    scale = max(1.0, float(np.max(np.abs(grid))))
    quad = _BetaQuadratics(problem, nodes=np.array([-scale, 0.0, scale]))
    theta = problem.xby - grid * problem.xbx
    omega2 = quad.omega2(grid, variance_method)
    z = norm.ppf(1.0 - alpha / 2.0)
    accepted = np.abs(theta) < z * np.sqrt(np.maximum(omega2, 0.0))

    intervals = []
    start = None
    for i, ok in enumerate(accepted):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            intervals.append((float(grid[start]), float(grid[i - 1])))
            start = None
    if start is not None:
        intervals.append((float(grid[start]), float(grid[-1])))
    return ConfidenceSet(
        intervals=intervals,
        grid=grid,
        accepted=accepted,
        unbounded_low=bool(accepted[0]),
        unbounded_high=bool(accepted[-1]),
    )


# -- variance components ----------------------------------------------------


class MatchStructure:
    """Worker-firm matched panel rows, clustered at the match level.

    Rows of the same match must share the worker and the firm; the last
    firm's effect is normalized to zero (its dummy column is dropped),
    worker dummies are complete.
    """

    def __init__(self, worker, firm, outcome, controls=None, match=None):
        self.worker = np.asarray(worker)
        self.firm = np.asarray(firm)
        self.outcome = np.asarray(outcome, dtype=np.float64).ravel()
        n = self.outcome.shape[0]
        if self.worker.shape[0] != n or self.firm.shape[0] != n:
            raise ValidationError("worker, firm, and outcome must align")
        if controls is None:
            self.controls = np.empty((n, 0))
        else:
            self.controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
            if self.controls.shape[0] != n:
                self.controls = self.controls.T
        if match is None:
            match = [(w, f) for w, f in zip(self.worker, self.firm)]
        else:
            match = list(match)
            seen: dict = {}
            for m, w, f in zip(match, self.worker, self.firm):
                if m in seen and seen[m] != (w, f):
                    raise ValidationError(
                        f"match {m!r} mixes worker/firm pairs {seen[m]} and {(w, f)}"
                    )
                seen.setdefault(m, (w, f))
        self.match = match

        self.workers = sorted(set(self.worker.tolist()))
        self.firms = sorted(set(self.firm.tolist()))
        self.n_workers = len(self.workers)
        self.n_firms = len(self.firms)

    @cached_property
    def dummies(self) -> tuple[np.ndarray, np.ndarray]:
        """(F, D): firm dummies with the last firm dropped, worker dummies."""
        widx = {w: i for i, w in enumerate(self.workers)}
        fidx = {f: i for i, f in enumerate(self.firms)}
        n = self.outcome.shape[0]
        F = np.zeros((n, max(self.n_firms - 1, 0)))
        D = np.zeros((n, self.n_workers))
        for i in range(n):
            j = fidx[self.firm[i]]
            if j < self.n_firms - 1:
                F[i, j] = 1.0
            D[i, widx[self.worker[i]]] = 1.0
        return F, D

    def to_design(self) -> ClusteredDesign:
        """Design with ``W = [firm dummies, worker dummies, controls]``, Y = X."""
        F, D = self.dummies
        W = np.hstack([F, D, self.controls])
        return build_design(self.match, self.outcome, self.outcome, W)


def varcomp_targets(structure: MatchStructure) -> dict[str, QuadFormTarget]:
    """Quadratic-form targets for firm/worker variance and their covariance.

    Keys: ``psi`` (firm-effect variance), ``alpha`` (worker-effect
    variance), ``cov`` (sorting covariance, symmetrized with the 1/2
    convention).  All are person-year weighted.
    """
    F, D = structure.dummies
    n = F.shape[0]
    jF = F.shape[1]
    jD = D.shape[1]
    dc = structure.controls.shape[1]
    d = jF + jD + dc

    Fc = F - F.mean(axis=0, keepdims=True)
    Dc = D - D.mean(axis=0, keepdims=True)

    def embed_factor(Q: np.ndarray, offset: int) -> np.ndarray:
        out = np.zeros((d, Q.shape[0]))
        out[offset:offset + Q.shape[1], :] = Q.T
        return out

    # variance targets factored through thin QR of the demeaned dummies
    rF = np.linalg.qr(Fc, mode="r")
    rD = np.linalg.qr(Dc, mode="r")
    L_psi = embed_factor(rF, 0) / math.sqrt(n)
    L_alpha = embed_factor(rD, jF) / math.sqrt(n)

    cross = Fc.T @ Dc / (2.0 * n)
    A_cov = np.zeros((d, d))
    A_cov[:jF, jF:jF + jD] = cross
    A_cov[jF:jF + jD, :jF] = cross.T

    return {
        "psi": QuadFormTarget.from_factors(L_psi),
        "alpha": QuadFormTarget.from_factors(L_alpha),
        "cov": QuadFormTarget.from_dense(A_cov),
    }


# -- linear restrictions ----------------------------------------------------


def restriction_target(design_or_ws, R, q) -> tuple[QuadFormTarget, float]:
    """Target and null value for testing ``R gamma = q``.

    ``A0 = R'(R (W'W)^{-1} R')^{-1} R`` in factored form and
    ``theta0 = q'(R (W'W)^{-1} R')^{-1} q``; the test runs with ``X = Y``.
    """
    ws = design_or_ws if isinstance(design_or_ws, ProjectionWorkspace) \
        else ProjectionWorkspace(design_or_ws)
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64).ravel()
    if R.shape[1] != ws.design.d:
        raise ValidationError(f"R must have d={ws.design.d} columns")
    if q.shape[0] != R.shape[0]:
        raise ValidationError("q must have one entry per restriction")
    Q = R @ ws.gram.solve(R.T)
    try:
        G = np.linalg.cholesky(0.5 * (Q + Q.T))
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(
            "R (W'W)^{-1} R' is singular; restrictions are not full row rank"
        ) from exc
    L = sla.solve_triangular(G, R, lower=True).T
    theta0 = float(np.sum(sla.solve_triangular(G, q, lower=True) ** 2))
    return QuadFormTarget.from_factors(L), theta0


def restriction_test(design, R, q, alpha: float = 0.05,
                     variance_method: str = "l3co") -> TestResult:
    """Full many-restriction test of ``R gamma = q`` on a design (X := Y)."""
    design = design.with_outcomes(X=design.Y)
    ws = ProjectionWorkspace(design)
    target, theta0 = restriction_target(ws, R, q)
    engine = QuadFormEngine(ws, target)
    theta = engine.theta_leaveout()
    omega2, flags = _variance_value(engine, variance_method, design.Y)
    res = t_test(theta, omega2, theta0=theta0, alpha=alpha)
    res.flags.extend(flags)
    return res
