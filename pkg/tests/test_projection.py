import math

import numpy as np
import pytest

from conftest import Instance
from clusterqf.design import build_design
from clusterqf.errors import RankDeficientError
from clusterqf.projection import (
    GuardStats,
    ProjectionWorkspace,
    block_solve_guarded,
    default_ridge_threshold,
    gram_factorize,
    leverage_diagnostics,
    operator_norm,
)


def _dummy_design(G=5, m=4):
    """Saturated cluster-indicator design: orthogonal clusters."""
    n = G * m
    W = np.zeros((n, G))
    W[np.arange(n), np.repeat(np.arange(G), m)] = 1.0
    rng = np.random.default_rng(0)
    return build_design(np.repeat(np.arange(G), m), rng.standard_normal(n),
                        rng.standard_normal(n), W)


def _cross_dummy_design(G=4, m=4):
    """Dummies orthogonal to the clustering: one group member per cluster."""
    n = G * m
    W = np.zeros((n, m))
    pos = np.tile(np.arange(m), G)
    W[np.arange(n), pos] = 1.0
    rng = np.random.default_rng(0)
    return build_design(np.repeat(np.arange(G), m), rng.standard_normal(n),
                        rng.standard_normal(n), W)


def test_gram_identity_design():
    d = build_design(np.arange(4), np.ones(4), np.ones(4), np.eye(4))
    f = gram_factorize(d)
    assert np.allclose(f.S, np.eye(4))
    assert f.lambda_min == pytest.approx(1.0)
    assert f.lambda_max == pytest.approx(1.0)


def test_gram_duplicate_column_rank_deficient():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((10, 3))
    W = np.hstack([W, W[:, [0]]])
    d = build_design(np.repeat([0, 1], 5), rng.standard_normal(10),
                     rng.standard_normal(10), W)
    with pytest.raises(RankDeficientError, match="collinear"):
        gram_factorize(d)


def test_gram_factor_reconstructs():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((20, 5))
    d = build_design(np.repeat(np.arange(5), 4), rng.standard_normal(20),
                     rng.standard_normal(20), W)
    f = gram_factorize(d)
    S = W.T @ W
    err = np.linalg.norm(f.chol @ f.chol.T - S) / np.linalg.norm(S)
    assert err < 1e-10


def test_projection_block_zero_rows():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((12, 3))
    W[0:3] = 0.0
    d = build_design(np.repeat(np.arange(4), 3), rng.standard_normal(12),
                     rng.standard_normal(12), W)
    ws = ProjectionWorkspace(d)
    assert np.allclose(ws.projection_block(0, 2), 0.0)


def test_projection_block_orthogonal_dummies():
    ws = ProjectionWorkspace(_dummy_design(G=4, m=3))
    assert np.allclose(ws.projection_block(0, 0), np.full((3, 3), 1 / 3))
    assert np.allclose(ws.projection_block(0, 2), 0.0)


def test_projection_blocks_idempotent():
    inst = Instance(seed=11, G=6, m=4, d=4)
    ws = inst.ws
    G = ws.design.G
    for g in range(G):
        acc = sum(ws.projection_block(g, h) @ ws.projection_block(h, g)
                  for h in range(G))
        assert np.linalg.norm(acc - ws.projection_block(g, g)) < 1e-10


def test_full_projection_identities():
    inst = Instance(seed=12, G=8, m=4, d=5)
    ws = inst.ws
    P, M, W = ws.P, ws.M, ws.design.W
    assert np.linalg.norm(P @ P - P) < 1e-8
    assert np.linalg.norm(M @ W) < 1e-8 * np.linalg.norm(W)
    # direct recomputation of a block
    S = W.T @ W
    g, h = 2, 5
    blk = W[ws.design.rows(g)] @ np.linalg.solve(S, W[ws.design.rows(h)].T)
    ref = ws.projection_block(g, h)
    assert np.linalg.norm(blk - ref) <= 1e-10 * (1 + np.linalg.norm(blk))


def test_uncached_block_mode_matches():
    inst = Instance(seed=13, G=5, m=3, d=3)
    small = ProjectionWorkspace(inst.design, cache_budget=16)  # force no cache
    assert small.P is None
    for g in range(5):
        for h in range(5):
            assert np.allclose(small.projection_block(g, h),
                               inst.ws.projection_block(g, h))
    assert np.allclose(small.MY, inst.ws.MY)


def test_ridge_threshold_value():
    assert default_ridge_threshold(600) == pytest.approx(1 / math.log(600**2))
    assert default_ridge_threshold(600) == pytest.approx(0.07817, abs=5e-5)


def test_block_solve_identity_passthrough():
    rhs = np.arange(6, dtype=float).reshape(3, 2)
    x, reg = block_solve_guarded(np.eye(3), rhs, t_n=0.5)
    assert not reg
    assert np.allclose(x, rhs)


def test_block_solve_pure_ridge():
    t_n = 0.35
    v = np.array([1.0, -2.0])
    x, reg = block_solve_guarded(np.zeros((2, 2)), t_n * v, t_n=t_n)
    assert reg
    assert np.allclose(x, v)


def test_block_solve_bitwise_same_path():
    import scipy.linalg as sla

    rng = np.random.default_rng(5)
    A = rng.standard_normal((4, 4))
    A = A @ A.T + 4.0 * np.eye(4)
    rhs = rng.standard_normal((4, 2))
    t_n = 0.5
    assert np.linalg.eigvalsh(A)[0] >= t_n
    stats = GuardStats()
    x, reg = block_solve_guarded(A, rhs, t_n, stats)
    assert not reg and stats.count == 0
    c, low = sla.cho_factor(A, lower=True)
    ref = sla.cho_solve((c, low), rhs)
    assert np.array_equal(x, ref)


def test_operator_norm_matches_svd(rng):
    for _ in range(20):
        Q = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 6)))
        assert operator_norm(Q) == pytest.approx(
            np.linalg.svd(Q, compute_uv=False)[0], rel=1e-6)


def test_diagnostics_own_cluster_dummies_closed_form():
    # own-cluster indicators: each diagonal projection block is the
    # averaging matrix, so the block norms saturate and leave-out fails
    ws = ProjectionWorkspace(_dummy_design(G=5, m=4))
    rep = leverage_diagnostics(ws)
    assert rep.lambda_n == pytest.approx(1.0, abs=1e-8)
    assert rep.phi_n == pytest.approx(1.0, abs=1e-8)
    assert rep.min_eig_M_diag == pytest.approx(0.0, abs=1e-10)
    assert rep.violators(c=0.01) == list(range(5))


def test_diagnostics_cross_dummies_closed_form():
    # dummies orthogonal to the clustering, one member per cluster:
    # P_{g,g} = I/G, so all floors have clean closed forms
    G = 4
    ws = ProjectionWorkspace(_cross_dummy_design(G=G, m=4))
    rep = leverage_diagnostics(ws)
    assert rep.lambda_n == pytest.approx(1 / G, abs=1e-8)
    assert rep.phi_n == pytest.approx(1 / G, abs=1e-8)
    assert rep.min_eig_M_diag == pytest.approx(1 - 1 / G, abs=1e-10)
    assert rep.violators(c=0.01) == []


def test_diagnostics_bounds_and_bruteforce():
    inst = Instance(seed=21, G=8, m=5, d=6)
    ws = inst.ws
    rep = leverage_diagnostics(ws)
    assert rep.lambda_n <= 1 + 1e-12
    assert rep.phi_n <= rep.lambda_n * max(ws.design.cluster_sizes) + 1e-12
    # dense full-matrix recomputation
    P = ws.design.W @ np.linalg.solve(ws.design.W.T @ ws.design.W,
                                      ws.design.W.T)
    lam = 0.0
    phi = 0.0
    for g in range(8):
        rg = ws.design.rows(g)
        row = 0.0
        for h in range(8):
            s = np.linalg.svd(P[rg, ws.design.rows(h)], compute_uv=False)[0]
            row += s * s
            if g == h:
                lam = max(lam, s)
        phi = max(phi, row)
    assert rep.lambda_n == pytest.approx(lam, abs=1e-10)
    assert rep.phi_n == pytest.approx(phi, abs=1e-8)
    assert rep.pairs_exhaustive and rep.triples_exhaustive


def test_diagnostics_sampling_budget():
    inst = Instance(seed=22, G=7, m=3, d=4)
    rep = leverage_diagnostics(inst.ws, pair_budget=10, triple_budget=9,
                               seed=1)
    assert rep.pairs_checked == 10 and not rep.pairs_exhaustive
    assert rep.triples_checked == 9 and not rep.triples_exhaustive
    assert rep.min_eig_S_pairs is not None
    assert rep.min_eig_S_triples is not None


def test_singleton_dummied_cluster_flagged():
    # one cluster is a singleton with its own dummy column: M_gg singular
    rng = np.random.default_rng(9)
    W = np.zeros((9, 2))
    W[:8, 0] = rng.standard_normal(8)
    W[8, 1] = 1.0
    d = build_design([0, 0, 0, 1, 1, 1, 2, 2, 3], np.arange(9.0),
                     np.arange(9.0), W)
    ws = ProjectionWorkspace(d)
    rep = leverage_diagnostics(ws)
    assert rep.violators(c=0.01) == [3]


def test_block_cache_thread_safety():
    from concurrent.futures import ThreadPoolExecutor

    inst = Instance(seed=31, G=6, m=3, d=3)
    small = ProjectionWorkspace(inst.design, cache_budget=16)

    def grab(args):
        g, h = args
        return small.projection_block(g, h)

    pairs = [(g, h) for g in range(6) for h in range(6)] * 4
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(grab, pairs))
    for (g, h), blk in zip(pairs, results):
        assert np.allclose(blk, inst.ws.projection_block(g, h))
