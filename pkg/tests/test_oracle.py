import numpy as np
import pytest

from conftest import Instance
from clusterqf.design import build_design
from clusterqf.errors import NotPSDError, SizeLimitError
from clusterqf.oracle import (
    cubature_rule,
    dense_reference_theta,
    dense_reference_variances,
    gaussian_expectation,
    isserlis_quartic,
    plugin_bias_expectation,
)


def test_cubature_point_count():
    for dim in (1, 2, 5, 8):
        pts, wts = cubature_rule(dim)
        assert pts.shape == (2 * dim * dim + 1, dim)
        assert wts.shape == (2 * dim * dim + 1,)


def test_expectation_of_constant():
    Sigma = np.eye(3)
    assert gaussian_expectation(lambda e: 1.0, Sigma) == pytest.approx(1.0)


def test_expectation_second_moments(rng):
    A = rng.standard_normal((4, 4))
    Sigma = A @ A.T
    for i in range(4):
        for j in range(4):
            val = gaussian_expectation(lambda e: e[i] * e[j], Sigma)
            assert val == pytest.approx(Sigma[i, j], rel=1e-12, abs=1e-12)


def test_expectation_pair_fourth_moment():
    assert gaussian_expectation(lambda e: (e[0] * e[1]) ** 2,
                                np.eye(2)) == pytest.approx(1.0)
    rng = np.random.default_rng(5)
    A = rng.standard_normal((2, 2))
    S = A @ A.T
    expect = S[0, 0] * S[1, 1] + 2 * S[0, 1] ** 2
    assert gaussian_expectation(lambda e: (e[0] * e[1]) ** 2,
                                S) == pytest.approx(expect, rel=1e-12)


def test_cubature_matches_isserlis_on_random_quartics(rng):
    for _ in range(50):
        dim = int(rng.integers(2, 10))
        A = rng.standard_normal((dim, dim))
        Sigma = A @ A.T + 0.5 * np.eye(dim)
        idx = rng.integers(0, dim, size=4)
        a, b, c, d = (int(v) for v in idx)
        val = gaussian_expectation(lambda e: e[a] * e[b] * e[c] * e[d], Sigma)
        ref = isserlis_quartic(Sigma, a, b, c, d)
        assert val == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_expectation_not_psd():
    Sigma = np.diag([1.0, -0.5])
    with pytest.raises(NotPSDError):
        gaussian_expectation(lambda e: 1.0, Sigma)


def test_expectation_size_limit():
    with pytest.raises(SizeLimitError):
        gaussian_expectation(lambda e: 1.0, np.eye(41))


def test_expectation_degree_limit():
    with pytest.raises(Exception):
        gaussian_expectation(lambda e: 1.0, np.eye(2), degree=6)


def test_dense_theta_zero_target():
    inst = Instance(seed=1)
    assert dense_reference_theta(inst.design, np.zeros((inst.d, inst.d))) == 0.0


def test_dense_theta_size_limit():
    rng = np.random.default_rng(2)
    design = build_design(np.repeat(np.arange(167), 3),
                          rng.standard_normal(501), rng.standard_normal(501),
                          rng.standard_normal((501, 2)))
    with pytest.raises(SizeLimitError):
        dense_reference_theta(design, np.eye(2))


def test_dense_variances_size_limit():
    inst = Instance(seed=3, G=9, m=2, d=2)
    with pytest.raises(SizeLimitError):
        dense_reference_variances(inst.design, inst.A0)


def test_plugin_psd_eigen_path():
    # with X = Y and a PSD target the plug-in equals its eigen form
    from clusterqf.quadform import theta_plugin

    rng = np.random.default_rng(4)
    d = 3
    L = rng.standard_normal((d, d))
    A0 = L @ L.T
    W = rng.standard_normal((15, d))
    y = rng.standard_normal(15)
    design = build_design(np.repeat(np.arange(5), 3), y, y, W)
    gam = np.linalg.lstsq(W, y, rcond=None)[0]
    evals, evecs = np.linalg.eigh(A0)
    via_eigen = float(np.sum(evals * (evecs.T @ gam) ** 2))
    assert theta_plugin(design, A0) == pytest.approx(via_eigen, rel=1e-10)
    assert via_eigen >= 0.0


def test_plugin_bias_expectation_matches_cubature():
    inst = Instance(seed=6, G=4, m=3, d=2)
    bias = plugin_bias_expectation(inst.engine, inst.blocks)

    def plug(e):
        X, Y = inst.xy_from_errors(e)
        return inst.engine.theta_plugin(X=X, Y=Y)

    Epi = gaussian_expectation(plug, inst.Sigma)
    assert Epi - inst.theta == pytest.approx(bias, abs=1e-8)


def test_h_eq_k_collapsed_triples_consistent():
    # duplicated third index collapses to a pair leave-out set; both
    # implementations must treat those boundary triples identically
    inst = Instance(seed=7, G=4, m=3, d=2)
    from clusterqf.variance import l3co_variance

    v3 = l3co_variance(inst.engine).value
    r3, _ = dense_reference_variances(inst.design, inst.A0)
    assert v3 == pytest.approx(r3, rel=1e-10)


def test_two_cluster_degenerate_case_runs():
    # with two clusters the triple sums collapse entirely to pair terms
    # and the pair annihilator is singular; the guarded path still
    # produces a finite flagged value
    import warnings

    from clusterqf.variance import l3co_variance

    inst = Instance(seed=7, G=2, m=3, d=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = l3co_variance(inst.engine)
    assert np.isfinite(est.value)
    assert est.regularized_solve_count > 0
