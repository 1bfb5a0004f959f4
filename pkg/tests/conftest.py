"""Shared builders for seeded test instances."""

from __future__ import annotations

import numpy as np
import pytest

from clusterqf.design import build_design
from clusterqf.projection import ProjectionWorkspace
from clusterqf.quadform import QuadFormEngine, QuadFormTarget


def equicorr_cross_blocks(sizes, rho=0.5, het_seed=None):
    """Per-cluster 2n_g x 2n_g covariances of stacked (U_g, V_g).

    Equicorrelated across all 2n_g coordinates at ``rho`` with unit
    variances; ``het_seed`` rescales coordinates to make one instance
    heteroskedastic.
    """
    rng = np.random.default_rng(het_seed) if het_seed is not None else None
    blocks = []
    for ng in sizes:
        dim = 2 * int(ng)
        base = rho * np.ones((dim, dim)) + (1 - rho) * np.eye(dim)
        if rng is not None:
            sd = 0.5 + rng.random(dim)
            base = base * np.outer(sd, sd)
        blocks.append(base)
    return blocks


def stack_sigma(blocks, sizes):
    """Assemble the 2n x 2n covariance of e = (U, V) from cluster blocks."""
    n = int(np.sum(sizes))
    starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    Sigma = np.zeros((2 * n, 2 * n))
    for g, blk in enumerate(blocks):
        ng = int(sizes[g])
        rU = slice(starts[g], starts[g] + ng)
        rV = slice(n + starts[g], n + starts[g] + ng)
        Sigma[rU, rU] = blk[:ng, :ng]
        Sigma[rU, rV] = blk[:ng, ng:]
        Sigma[rV, rU] = blk[ng:, :ng]
        Sigma[rV, rV] = blk[ng:, ng:]
    return Sigma


class Instance:
    """A fully specified small quadratic-form problem with known truth."""

    def __init__(self, seed, G=4, m=4, d=3, rho=0.5, het=False, t_n=1e-9,
                 factored=False):
        rng = np.random.default_rng(seed)
        self.sizes = np.full(G, m, dtype=np.int64)
        n = G * m
        self.n, self.G, self.d = n, G, d
        self.W = rng.standard_normal((n, d))
        self.pi = rng.standard_normal(d)
        self.gamma = rng.standard_normal(d)
        self.Pi = self.W @ self.pi
        self.Gamma = self.W @ self.gamma
        if factored:
            r = max(1, d - 1)
            L = rng.standard_normal((d, r))
            R = rng.standard_normal((d, r))
            self.target = QuadFormTarget.from_factors(L, R)
            self.A0 = L @ R.T
        else:
            self.A0 = rng.standard_normal((d, d))
            self.target = QuadFormTarget.from_dense(self.A0)
        self.theta = float(self.pi @ self.A0 @ self.gamma)
        self.blocks = equicorr_cross_blocks(
            self.sizes, rho=rho, het_seed=seed if het else None)
        self.Sigma = stack_sigma(self.blocks, self.sizes)
        U, V = self.draw_errors(rng)
        self.cluster = np.repeat(np.arange(G), m)
        self.design = build_design(self.cluster, self.Gamma + U, self.Pi + V,
                                   self.W)
        self.ws = ProjectionWorkspace(self.design, t_n=t_n)
        self.engine = QuadFormEngine(self.ws, self.target)

    def draw_errors(self, rng):
        root = np.linalg.cholesky(
            self.Sigma + 1e-12 * np.eye(2 * self.n))
        e = root @ rng.standard_normal(2 * self.n)
        return e[: self.n], e[self.n:]

    def xy_from_errors(self, e):
        return self.Pi + e[self.n:], self.Gamma + e[: self.n]


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
