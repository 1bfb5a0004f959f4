"""Unbiased estimation and cluster-robust inference for quadratic forms.

Point estimation of ``theta = pi' A0 gamma`` from two linear regressions
with clustered errors and many covariates, leave-cluster-out bias
correction, consistent (leave-three-out) and conservative (leave-two-out)
variance estimators, IV / variance-component / restriction-test front
ends, and a Monte Carlo harness.
"""

from .design import ClusteredDesign, build_design, read_design_csv
from .projection import (
    GramFactor,
    ProjectionWorkspace,
    block_solve_guarded,
    default_ridge_threshold,
    gram_factorize,
    leverage_diagnostics,
)
from .quadform import (
    QuadFormEngine,
    QuadFormTarget,
    bias_correction_KR,
    bias_correction_LO,
    leaveout_coeffs,
    leaveout_residuals,
    theta_KR,
    theta_leaveout,
    theta_plugin,
)
from .variance import (
    TestResult,
    VarianceEstimate,
    l2co_variance,
    l3co_variance,
    l3co_variance_nonneg,
    mtilde,
    oracle_omega,
    t_test,
)
from .applications import (
    IVProblem,
    MatchStructure,
    iv_confidence_set,
    iv_lm_test,
    iv_point_estimate,
    restriction_target,
    restriction_test,
    varcomp_targets,
)
from .simulation import (
    DesignConfig,
    SimulationReport,
    generate_design1,
    generate_design2,
    generate_design3,
    run_size_power,
    tsls_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "ClusteredDesign",
    "build_design",
    "read_design_csv",
    "GramFactor",
    "ProjectionWorkspace",
    "block_solve_guarded",
    "default_ridge_threshold",
    "gram_factorize",
    "leverage_diagnostics",
    "QuadFormEngine",
    "QuadFormTarget",
    "bias_correction_KR",
    "bias_correction_LO",
    "leaveout_coeffs",
    "leaveout_residuals",
    "theta_KR",
    "theta_leaveout",
    "theta_plugin",
    "TestResult",
    "VarianceEstimate",
    "l2co_variance",
    "l3co_variance",
    "l3co_variance_nonneg",
    "mtilde",
    "oracle_omega",
    "t_test",
    "IVProblem",
    "MatchStructure",
    "iv_confidence_set",
    "iv_lm_test",
    "iv_point_estimate",
    "restriction_target",
    "restriction_test",
    "varcomp_targets",
    "DesignConfig",
    "SimulationReport",
    "generate_design1",
    "generate_design2",
    "generate_design3",
    "run_size_power",
    "tsls_baseline",
]
