"""Monte Carlo designs and the size/power harness.

Three data-generating processes: a homogeneous-effect panel IV with
equicorrelated instruments and moving-average errors, a saturated
heterogeneous-effect design with state-by-group instrument cells, and a
judge-leniency design whose causal estimand is computed by deterministic
quadrature.  Every draw is a pure function of ``(seed, design, rep)``
through keyed seed sequences, so replications are reproducible and
parallel-safe.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from .applications import IVProblem, _BetaQuadratics
from .errors import ClusterQFError, ValidationError
from .variance import l3co_terms


def stream_rng(seed: int, design: int, rep: int, stream: int = 0) -> np.random.Generator:
    """Independent generator keyed by (seed, design, rep, stream)."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=(int(design), int(rep), int(stream)))
    return np.random.default_rng(ss)


# -- Design 1: homogeneous effect, equicorrelated instruments ----------------

DESIGN1_N = 600
DESIGN1_G = 150
DESIGN1_CLUSTER = 4
DESIGN1_BETA = 0.3
DESIGN1_THETA1 = 0.5   # within-cluster equicorrelation of the instruments
DESIGN1_THETA2 = 0.7   # moving-average mixing of the errors
DESIGN1_RHO = 0.5


def _design1_raw(dims: int, rng: np.random.Generator) -> dict:
    """All primitive draws of design 1, before demeaning."""
    d_z = d_w = int(dims)
    if d_w < 5:
        raise ValidationError("design 1 needs at least 5 control columns")
    G, m = DESIGN1_G, DESIGN1_CLUSTER
    n = G * m

    # instruments: per coordinate and cluster, N(0, equicorrelated)
    C1 = np.linalg.cholesky(
        (1.0 - DESIGN1_THETA1) * np.eye(m) + DESIGN1_THETA1 * np.ones((m, m)))
    E = rng.standard_normal((G, m, d_z))
    Z = (C1 @ E).reshape(n, d_z)

    z = rng.standard_normal(n)
    D = (rng.random((n, d_w - 4)) < 0.5).astype(np.float64)
    controls = np.empty((n, d_w))
    controls[:, 0] = z
    controls[:, 1] = z**2 - 1.0
    controls[:, 2] = z**3 - 3.0 * z
    controls[:, 3] = z**4 - 6.0 * z**2 + 3.0
    controls[:, 4:] = z[:, None] * (D - 0.5)

    sigma = np.sqrt((0.2 + z**2) / 2.4)
    rho = DESIGN1_RHO
    eps = rng.standard_normal(n)
    eta = rng.standard_normal(n)
    v = rng.standard_normal(n)
    Ut = rho * eps + np.sqrt(1.0 - rho**2) * sigma * v
    Vt = rho * eta + np.sqrt(1.0 - rho**2) * sigma * v
    # causal moving-average mixing down each cluster
    L2 = np.tril(DESIGN1_THETA2 ** np.maximum(
        np.subtract.outer(np.arange(m), np.arange(m)), 0))
    L2 = np.tril(L2)
    U = (L2 @ Ut.reshape(G, m, 1)).reshape(n)
    V = (L2 @ Vt.reshape(G, m, 1)).reshape(n)

    gid = np.arange(1, G + 1) / G
    alpha_g = rng.standard_normal(G) + gid
    xi_g = rng.standard_normal(G) + gid

    pi_scale = np.sqrt(30.0 / (np.sqrt(d_z) * n))
    gamma = np.full(d_w, 1.0 / np.sqrt(d_w))
    X = Z @ np.full(d_z, pi_scale) + controls @ gamma + np.repeat(xi_g, m) + V
    Ycal = X * DESIGN1_BETA + controls @ gamma + np.repeat(alpha_g, m) + U
    return {"Z": Z, "controls": controls, "X": X, "Ycal": Ycal, "z": z,
            "U": U, "V": V, "n": n, "G": G, "m": m}


def _demean_by_cluster(arr: np.ndarray, G: int, m: int) -> np.ndarray:
    a = arr.reshape(G, m, -1)
    out = a - a.mean(axis=1, keepdims=True)
    return out.reshape(arr.shape)


def generate_design1(dims: int, rep: int, seed: int) -> tuple[IVProblem, float]:
    """One replication of design 1; returns the problem and the true beta.

    Cluster fixed effects are partialled out by demeaning every variable
    within cluster, so the effective regressor count is ``2 * dims``.
    """
    raw = _design1_raw(dims, stream_rng(seed, 1, rep))
    G, m = raw["G"], raw["m"]
    Z = _demean_by_cluster(raw["Z"], G, m)
    controls = _demean_by_cluster(raw["controls"], G, m)
    X = _demean_by_cluster(raw["X"], G, m).ravel()
    Ycal = _demean_by_cluster(raw["Ycal"], G, m).ravel()
    cluster = np.repeat(np.arange(G), m)
    problem = IVProblem(cluster, Ycal, X, Z, controls)
    return problem, DESIGN1_BETA


# -- Design 2: heterogeneous effect, saturated cells -------------------------

DESIGN2_K = 48
DESIGN2_CLUSTERS_PER_STATE = 4
DESIGN2_CLUSTER = 4
DESIGN2_BETA = 0.5
DESIGN2_RHO = 0.4
DESIGN2_MU = 0.4
DESIGN2_SIGMA_EPS = 0.2
DESIGN2_P = 2.0 / 3.0


def _design2_signs(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic half/half sign patterns for pi and sigma_xi by state."""
    half = (K + 1) // 2
    pi_sign = np.where(np.arange(K) < half, 1.0, -1.0)
    xi_sign = np.empty(K)
    for block, idx in ((1.0, np.arange(half)), (-1.0, np.arange(half, K))):
        nblk = idx.size
        xi_sign[idx] = np.where(np.arange(nblk) < (nblk + 1) // 2, 1.0, -1.0)
        del block
    return pi_sign, xi_sign


def _design2_raw(rng: np.random.Generator) -> dict:
    K = DESIGN2_K
    G = K * DESIGN2_CLUSTERS_PER_STATE
    m = DESIGN2_CLUSTER
    n = G * m
    state = np.repeat(np.arange(K), DESIGN2_CLUSTERS_PER_STATE * m)
    Bvar = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), G)

    pi0 = np.sqrt(15.0 * np.sqrt(K) / n)
    sig0 = np.sqrt(30.0 * np.sqrt(K) / n)
    gam0 = 1.0 / np.sqrt(K)
    pi_sign, xi_sign = _design2_signs(K)

    u_g = rng.standard_normal(G)
    v_i = rng.standard_normal(n)
    rho = DESIGN2_RHO
    V = 2.0 * norm.cdf(rho * np.repeat(u_g, m) + np.sqrt(1 - rho**2) * v_i) - 1.0

    index = pi0 * pi_sign[state] * Bvar + gam0 * pi_sign[state]
    X = (index >= V).astype(np.float64)

    U = np.where(V >= 0.0, DESIGN2_MU, -DESIGN2_MU) \
        + DESIGN2_SIGMA_EPS * rng.standard_normal(n)

    sig_xi = sig0 * xi_sign[state] * Bvar  # zero for the B = 0 cell
    p_up = np.where(V >= 0.0, DESIGN2_P, 1.0 - DESIGN2_P)
    xi = np.where(rng.random(n) < p_up, sig_xi, -sig_xi)

    Ycal = X * (DESIGN2_BETA + xi) + gam0 * pi_sign[state] + U
    return {"state": state, "B": Bvar, "X": X, "Ycal": Ycal, "V": V,
            "G": G, "m": m, "n": n, "K": K}


def generate_design2(rep: int, seed: int) -> tuple[IVProblem, float]:
    """One replication of design 2; the saturated-cell estimand equals beta."""
    raw = _design2_raw(stream_rng(seed, 2, rep))
    K, G, m, n = raw["K"], raw["G"], raw["m"], raw["n"]
    state, Bvar = raw["state"], raw["B"]
    controls = np.zeros((n, K))
    controls[np.arange(n), state] = 1.0
    Z = np.zeros((n, K))
    on = Bvar > 0.5
    Z[np.where(on)[0], state[on]] = 1.0
    cluster = np.repeat(np.arange(G), m)
    problem = IVProblem(cluster, raw["Ycal"], raw["X"], Z, controls)
    return problem, DESIGN2_BETA


# -- Design 3: judge leniency with binned controls ---------------------------

DESIGN3_G = 200
DESIGN3_CLUSTER = 4
DESIGN3_J = 4
DESIGN3_K = 5
DESIGN3_BINS = 6
DESIGN3_PARAMS = {
    "alpha0": -0.8, "alpha1": 1.0, "alpha2": 0.6,
    "beta0": -0.8, "beta1": 1.0, "beta2": 0.6, "beta3": 1.0,
    "rho1": 0.8, "rho2": 0.8, "rho3": 0.3,
}


def _design3_raw(rng: np.random.Generator, params: dict) -> dict:
    G, m, J, K = DESIGN3_G, DESIGN3_CLUSTER, DESIGN3_J, DESIGN3_K
    n = G * m
    p = params
    judge = 1 + np.repeat(np.arange(G) // (G // J), m)  # 1..J, even blocks
    # levels balanced within each judge's clusters (random order), so every
    # (judge, level) cell is large enough for the within-cell bins
    per_judge = G // J
    S2_cluster = np.empty(G, dtype=np.int64)
    for j in range(J):
        block = np.tile(np.arange(K), per_judge // K + 1)[:per_judge]
        S2_cluster[j * per_judge:(j + 1) * per_judge] = rng.permutation(block)
    S2 = np.repeat(S2_cluster, m).astype(np.float64)
    S1 = rng.random(n)

    xi1 = np.repeat(rng.standard_normal(G), m)
    xi2 = np.repeat(rng.standard_normal(G), m)
    eps1 = rng.standard_normal(n)
    eps2 = rng.standard_normal(n)
    U = p["rho1"] * xi1 + np.sqrt(1 - p["rho1"] ** 2) * eps1
    V = p["rho2"] * U + np.sqrt(1 - p["rho2"] ** 2) * (
        p["rho3"] * xi2 + np.sqrt(1 - p["rho3"] ** 2) * eps2)

    X = (U <= p["alpha0"] + (p["alpha1"] + p["alpha2"] * S1) * judge / J)
    X = X.astype(np.float64)
    Ycal = (V <= p["beta0"] + p["beta1"] * X + p["beta2"] * S1 + p["beta3"] * S2)
    Ycal = Ycal.astype(np.float64)
    return {"judge": judge, "S1": S1, "S2": S2, "X": X, "Ycal": Ycal,
            "n": n, "G": G, "m": m}


def _design3_bins(judge: np.ndarray, S2: np.ndarray, S1: np.ndarray) -> np.ndarray:
    """Even rank-based bins of S1 within each (judge, S2) cell."""
    n = S1.shape[0]
    nb = DESIGN3_BINS
    bins = np.zeros(n, dtype=np.int64)
    for j in np.unique(judge):
        for k in np.unique(S2):
            idx = np.where((judge == j) & (S2 == k))[0]
            if idx.size == 0:
                continue
            order = idx[np.argsort(S1[idx], kind="stable")]
            for b, part in enumerate(np.array_split(order, nb)):
                bins[part] = b
    return bins


def generate_design3(rep: int, seed: int, params: dict | None = None) -> tuple[IVProblem, float]:
    """One replication of design 3; the estimand comes from quadrature.

    Controls are bin-by-level interactions (all-zero columns dropped), and
    the instruments interact the first three judge dummies with the
    controls.
    """
    p = dict(DESIGN3_PARAMS if params is None else params)
    raw = _design3_raw(stream_rng(seed, 3, rep), p)
    judge, S1, S2 = raw["judge"], raw["S1"], raw["S2"]
    n, G, m = raw["n"], raw["G"], raw["m"]
    bins = _design3_bins(judge, S2, S1)

    K, nb = DESIGN3_K, DESIGN3_BINS
    controls = np.zeros((n, nb * K))
    controls[np.arange(n), bins * K + S2.astype(np.int64)] = 1.0
    keep = controls.any(axis=0)
    controls = controls[:, keep]

    Zparts = [controls * (judge == l)[:, None] for l in (1, 2, 3)]
    Z = np.hstack(Zparts)
    Z = Z[:, Z.any(axis=0)]

    cluster = np.repeat(np.arange(G), m)
    problem = IVProblem(cluster, raw["Ycal"], raw["X"], Z, controls)
    return problem, design3_estimand(tuple(sorted(p.items())))


def bvn_cdf(h, k, rho: float, nodes: int = 96):
    """P(X <= h, Y <= k) for standard bivariate normals, by quadrature.

    Single-integral form integrated with fixed Gauss-Legendre nodes on
    [0, rho]; smooth for |rho| < 1 and accurate to ~1e-14 at 96 nodes.
    """
    h = np.asarray(h, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    base = norm.cdf(h) * norm.cdf(k)
    if rho == 0.0:
        return base
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * rho * (x + 1.0)
    wr = 0.5 * rho * w
    hh = h[..., None]
    kk = k[..., None]
    om = 1.0 - r**2
    integrand = np.exp(-(hh**2 - 2.0 * r * hh * kk + kk**2) / (2.0 * om)) \
        / np.sqrt(om)
    return base + (integrand @ wr) / (2.0 * np.pi)


@lru_cache(maxsize=16)
def design3_estimand(params_items: tuple) -> float:
    """Population IV estimand of design 3 via deterministic quadrature.

    Integrates the per-bin conditional means of treatment and outcome over
    the within-bin uniform part of S1 (64-point Gauss-Legendre per bin),
    enumerates the discrete level and the judges, and forms the ratio of
    across-judge covariances.  The special case with no S dependence
    collapses to a probit difference, which the tests pin at 1e-6.
    """
    p = dict(params_items)
    J, K, nb = DESIGN3_J, DESIGN3_K, DESIGN3_BINS
    x64, w64 = np.polynomial.legendre.leggauss(64)
    num = 0.0
    den = 0.0
    for b in range(nb):
        lo, hi = b / nb, (b + 1) / nb
        s = 0.5 * (hi - lo) * (x64 + 1.0) + lo
        w = 0.5 * (hi - lo) * w64 * nb  # weights of the conditional mean
        mX = np.empty(J)
        mY = np.empty((J, K))
        for j in range(1, J + 1):
            c = p["alpha0"] + (p["alpha1"] + p["alpha2"] * s) * j / J
            mX[j - 1] = np.sum(w * norm.cdf(c))
            for k in range(K):
                a1 = p["beta0"] + p["beta1"] + p["beta2"] * s + p["beta3"] * k
                a0 = p["beta0"] + p["beta2"] * s + p["beta3"] * k
                prob = bvn_cdf(a1, c, p["rho2"]) + norm.cdf(a0) \
                    - bvn_cdf(a0, c, p["rho2"])
                mY[j - 1, k] = np.sum(w * prob)
        dx = mX - mX.mean()
        den += K * float(dx @ dx) / J
        for k in range(K):
            num += float(dx @ (mY[:, k] - mY[:, k].mean())) / J
    return num / den


# -- TSLS baseline ------------------------------------------------------------


@dataclass
class TSLSPieces:
    """Sufficient statistics to evaluate the null-imposed TSLS test cheaply."""

    beta_tsls: float
    den: float
    s0: np.ndarray  # per-cluster scores of the outcome part
    s1: np.ndarray  # per-cluster scores of the treatment part

    def t_stat(self, beta0: float) -> float:
        meat = float(np.sum((self.s0 - beta0 * self.s1) ** 2))
        if meat <= 0.0:
            return np.inf
        return (self.beta_tsls - beta0) / np.sqrt(meat / self.den**2)


def tsls_pieces(problem: IVProblem) -> TSLSPieces:
    """Two-stage least squares with a cluster-robust (sandwich) variance.

    The structural residual imposes the hypothesized value, matching how
    the cluster-robust comparison is run in the experiments.
    """
    import scipy.linalg as sla

    d = problem.design
    W = d.W
    Wc = W[:, : problem.d_w]
    Z = W[:, problem.instrument_cols]
    X = problem.treatment
    Ycal = problem.outcome
    if problem.d_w:
        c, low = sla.cho_factor(Wc.T @ Wc, lower=True)

        def partial(v):
            return v - Wc @ sla.cho_solve((c, low), Wc.T @ v)
    else:
        def partial(v):
            return v
    Zt = partial(Z)
    cz, lowz = sla.cho_factor(Zt.T @ Zt, lower=True)
    xhat = Zt @ sla.cho_solve((cz, lowz), Zt.T @ X)
    den = float(xhat @ X)
    beta_tsls = float(xhat @ Ycal) / den
    a = partial(Ycal)
    cvec = partial(X)
    starts = d.starts
    s0 = np.add.reduceat(xhat * a, starts[:-1])
    s1 = np.add.reduceat(xhat * cvec, starts[:-1])
    return TSLSPieces(beta_tsls=beta_tsls, den=den, s0=s0, s1=s1)


def tsls_baseline(problem: IVProblem, beta0: float, alpha: float = 0.05):
    """TestResult of the TSLS t-test of ``beta = beta0`` (null imposed)."""
    from .variance import TestResult

    pieces = tsls_pieces(problem)
    t = pieces.t_stat(beta0)
    z = norm.ppf(1 - alpha / 2)
    meat = float(np.sum((pieces.s0 - beta0 * pieces.s1) ** 2))
    se = np.sqrt(meat) / abs(pieces.den)
    return TestResult(
        theta_hat=pieces.beta_tsls,
        omega_hat=float(se),
        t_stat=float(t),
        p_value=float(2 * norm.sf(abs(t))),
        ci=(pieces.beta_tsls - z * se, pieces.beta_tsls + z * se),
        alpha=alpha,
        reject=bool(abs(t) >= z),
    )


# -- harness ------------------------------------------------------------------

KNOWN_METHODS = ("l3co", "l3co_nonneg", "l2co", "tsls")


@dataclass
class DesignConfig:
    """What to simulate and how many times."""

    design: int
    dims: int = 50
    reps: int = 100
    seed: int = 0
    alphas: tuple = (0.05, 0.10)
    power_grid: tuple = ()
    methods: tuple = ("l3co", "tsls")
    store_stats: bool = True
    design3_params: dict | None = None

    def __post_init__(self):
        if self.reps < 1:
            raise ValidationError("need at least one replication")
        if self.design not in (1, 2, 3):
            raise ValidationError("design must be 1, 2, or 3")
        if self.design == 1 and self.dims not in (50, 100, 150):
            # other sizes work, but flag obvious typos of the standard grid
            if self.dims < 5:
                raise ValidationError("design 1 dims must be at least 5")
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ValidationError(f"unknown method(s) {unknown}; "
                                  f"known: {list(KNOWN_METHODS)}")


@dataclass
class SimulationReport:
    """Rejection rates with Monte Carlo standard errors, plus power curves."""

    config: dict
    estimand: float
    rejection: dict          # method -> alpha -> rate at the null
    mc_se: dict              # method -> alpha -> binomial se
    power: dict              # method -> alpha -> list over grid offsets
    reps_done: int
    failures: list
    t_stats: dict            # method -> per-rep studentized stats at the null
    timing: dict
    schema_version: str = "1"

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "estimand": self.estimand,
            "rejection": self.rejection,
            "mc_se": self.mc_se,
            "power": self.power,
            "reps_done": self.reps_done,
            "failures": self.failures,
            "timing": self.timing,
        }

    def curves_rows(self) -> list[dict]:
        rows = []
        grid = [0.0] + list(self.config["power_grid"])
        for method, per_alpha in self.power.items():
            for alpha, rates in per_alpha.items():
                for off, rate in zip(grid, rates):
                    r = float(rate)
                    se = np.sqrt(r * (1 - r) / self.reps_done) if self.reps_done else 0.0
                    rows.append({
                        "design": self.config["design"], "method": method,
                        "alpha": float(alpha), "beta_offset": float(off),
                        "reject_rate": r, "mc_se": float(se),
                    })
        return rows


def generate_problem(config: DesignConfig, rep: int) -> tuple[IVProblem, float]:
    if config.design == 1:
        return generate_design1(config.dims, rep, config.seed)
    if config.design == 2:
        return generate_design2(rep, config.seed)
    return generate_design3(rep, config.seed, config.design3_params)


def _simulate_rep(config: DesignConfig, rep: int) -> dict:
    t_start = time.perf_counter()
    try:
        problem, estimand = generate_problem(config, rep)
        offsets = np.array([0.0] + list(config.power_grid))
        betas = estimand + offsets
        zs = {a: norm.ppf(1 - a / 2) for a in config.alphas}
        out: dict = {"rep": rep, "failed": None, "estimand": estimand,
                     "rejects": {}, "t_null": {}}

        need_lo = [m for m in config.methods if m != "tsls"]
        if need_lo:
            theta = problem.xby - betas * problem.xbx
            if offsets.size > 1:
                span = max(1.0, 2.0 * float(np.max(np.abs(betas))))
                quad = _BetaQuadratics(
                    problem, nodes=estimand + span * np.array([-1.0, 0.0, 1.0]))
                t1 = quad._eval(quad.c_tilde1, betas)
                t2 = quad._eval(quad.c_tilde2, betas)
                l2 = quad._eval(quad.c_l2co, betas)
            else:
                terms = l3co_terms(problem.engine, Y=problem.adjusted_outcome(betas[0]))
                t1 = np.array([terms.tilde1])
                t2 = np.array([terms.tilde2])
                l2 = None
                if "l2co" in config.methods:
                    from .variance import l2co_variance
                    l2 = np.array([l2co_variance(
                        problem.engine, Y=problem.adjusted_outcome(betas[0])).value])
            omega2 = {
                "l3co": np.where(np.minimum(t1, t2) >= 0.0, t1 + t2,
                                 np.abs(t1) + np.abs(t2)),
                "l3co_nonneg": np.abs(t1) + np.abs(t2),
            }
            if l2 is not None:
                omega2["l2co"] = l2
            for method in need_lo:
                w2 = omega2[method]
                tvals = theta / np.sqrt(np.maximum(w2, np.finfo(np.float64).tiny))
                out["rejects"][method] = {
                    a: (np.abs(tvals) >= zs[a]).tolist() for a in config.alphas}
                out["t_null"][method] = float(tvals[0])

        if "tsls" in config.methods:
            pieces = tsls_pieces(problem)
            tvals = np.array([pieces.t_stat(b) for b in betas])
            out["rejects"]["tsls"] = {
                a: (np.abs(tvals) >= zs[a]).tolist() for a in config.alphas}
            out["t_null"]["tsls"] = float(tvals[0])
    except (ClusterQFError, np.linalg.LinAlgError) as exc:
        return {"rep": rep, "failed": f"{type(exc).__name__}: {exc}",
                "time": time.perf_counter() - t_start}
    out["time"] = time.perf_counter() - t_start
    return out


def run_size_power(config: DesignConfig, workers: int = 1) -> SimulationReport:
    """Run the full size/power experiment for one configuration.

    Outcomes are tallied in replication order, so reports are identical
    for any worker count.  A replication whose estimator raises is
    recorded as failed and excluded from the denominators, never silently
    dropped.
    """
    reps = range(config.reps)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_rep, [config] * config.reps, reps,
                                    chunksize=max(1, config.reps // (8 * workers))))
    else:
        results = [_simulate_rep(config, rep) for rep in reps]
    results.sort(key=lambda r: r["rep"])

    n_off = 1 + len(config.power_grid)
    counts = {m: {a: np.zeros(n_off, dtype=np.int64) for a in config.alphas}
              for m in config.methods}
    t_stats = {m: [] for m in config.methods}
    failures = []
    times = []
    done = 0
    estimand = np.nan
    for res in results:
        times.append(res.get("time", np.nan))
        if res["failed"] is not None:
            failures.append({"rep": res["rep"], "error": res["failed"]})
            continue
        done += 1
        estimand = res["estimand"]
        for m in config.methods:
            for a in config.alphas:
                counts[m][a] += np.asarray(res["rejects"][m][a], dtype=np.int64)
            if config.store_stats:
                t_stats[m].append(res["t_null"][m])

    rejection = {}
    mc_se = {}
    power = {}
    for m in config.methods:
        rejection[m] = {}
        mc_se[m] = {}
        power[m] = {}
        for a in config.alphas:
            rates = counts[m][a] / max(done, 1)
            rejection[m][a] = float(rates[0])
            mc_se[m][a] = float(np.sqrt(rates[0] * (1 - rates[0]) / max(done, 1)))
            power[m][a] = rates.tolist()
    return SimulationReport(
        config={
            "design": config.design, "dims": config.dims, "reps": config.reps,
            "seed": config.seed, "alphas": list(config.alphas),
            "power_grid": list(config.power_grid), "methods": list(config.methods),
        },
        estimand=float(estimand),
        rejection=rejection,
        mc_se=mc_se,
        power=power,
        reps_done=done,
        failures=failures,
        t_stats={m: v for m, v in t_stats.items()} if config.store_stats else {},
        timing={
            "total_s": float(np.nansum(times)),
            "per_rep_mean_s": float(np.nanmean(times)) if times else 0.0,
            "per_rep_max_s": float(np.nanmax(times)) if times else 0.0,
        },
    )
