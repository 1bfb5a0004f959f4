import json
import subprocess
import sys

import numpy as np
import pytest

from clusterqf.cli import main
from clusterqf.design import build_design, write_design_csv
from clusterqf.oracle import dense_reference_theta
from clusterqf.results import validate_result


def _fixture_design(tmp_path, seed=0, G=6, m=3, d=3):
    rng = np.random.default_rng(seed)
    n = G * m
    W = rng.standard_normal((n, d))
    design = build_design(np.repeat(np.arange(G), m), rng.standard_normal(n),
                          rng.standard_normal(n), W)
    path = tmp_path / "data.csv"
    write_design_csv(design, path)
    A0 = rng.standard_normal((d, d))
    a0_path = tmp_path / "a0.csv"
    np.savetxt(a0_path, A0, delimiter=",", fmt="%.17g")
    return design, A0, path, a0_path


def test_estimate_matches_dense_reference(tmp_path, capsys):
    design, A0, data, a0 = _fixture_design(tmp_path)
    out = tmp_path / "res.json"
    code = main(["estimate", "--input", str(data), "--a0", str(a0),
                 "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    validate_result(res)
    golden = dense_reference_theta(design, A0)
    assert res["theta_hat"] == pytest.approx(golden, rel=1e-8)
    assert res["omega2_l3co"] is not None
    assert res["omega2_l2co"] >= 0.0


def test_estimate_missing_cluster_column(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("group,y,x,w_1\n1,0.1,0.2,0.3\n")
    code = main(["estimate", "--input", str(path), "--a0", "unused.csv"])
    assert code == 2
    assert "cluster" in capsys.readouterr().err


def test_estimate_without_target_is_validation_error(tmp_path, capsys):
    _, _, data, _ = _fixture_design(tmp_path)
    code = main(["estimate", "--input", str(data)])
    assert code == 2


def test_estimate_l2co_on_two_clusters_warns(tmp_path):
    rng = np.random.default_rng(1)
    design = build_design(np.repeat([0, 1], 6), rng.standard_normal(12),
                          rng.standard_normal(12), rng.standard_normal((12, 2)))
    data = tmp_path / "two.csv"
    write_design_csv(design, data)
    a0 = tmp_path / "a0.csv"
    np.savetxt(a0, np.eye(2), delimiter=",", fmt="%.17g")
    out = tmp_path / "res.json"
    code = main(["estimate", "--input", str(data), "--a0", str(a0),
                 "--variance", "l2co", "--primary", "l2co", "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    assert res["warnings"] or res["omega2_l2co"] is not None


def test_collinear_design_exits_numerical(tmp_path, capsys):
    rng = np.random.default_rng(2)
    W = rng.standard_normal((12, 2))
    W = np.hstack([W, W[:, [0]]])
    design = build_design(np.repeat(np.arange(4), 3), rng.standard_normal(12),
                          rng.standard_normal(12), W)
    data = tmp_path / "col.csv"
    write_design_csv(design, data)
    a0 = tmp_path / "a0.csv"
    np.savetxt(a0, np.eye(3), delimiter=",", fmt="%.17g")
    code = main(["estimate", "--input", str(data), "--a0", str(a0)])
    assert code == 3


def test_ftest_subcommand(tmp_path):
    design, _, data, _ = _fixture_design(tmp_path, seed=3)
    R = np.zeros((1, 3))
    R[0, 1] = 1.0
    rpath = tmp_path / "R.csv"
    np.savetxt(rpath, R, delimiter=",", fmt="%.17g")
    out = tmp_path / "res.json"
    code = main(["ftest", "--input", str(data), "--restrictions", str(rpath),
                 "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    assert res["theta0"] == 0.0
    validate_result(res)


def test_iv_subcommand_lm_and_ci(tmp_path):
    rng = np.random.default_rng(4)
    import pandas as pd

    G, m = 25, 3
    n = G * m
    Z = rng.standard_normal((n, 2))
    X = Z @ [1.2, 0.7] + rng.standard_normal(n)
    Ycal = 0.5 * X + rng.standard_normal(n)
    df = pd.DataFrame({
        "cluster": np.repeat(np.arange(G), m), "yvar": Ycal, "treat": X,
        "z_1": Z[:, 0], "z_2": Z[:, 1], "c_1": np.ones(n),
    })
    data = tmp_path / "iv.csv"
    df.to_csv(data, index=False)
    out = tmp_path / "iv.json"
    code = main(["iv", "--input", str(data), "--outcome", "yvar",
                 "--treatment", "treat", "--instruments", "z_*",
                 "--controls", "c_1", "--beta0", "0.5",
                 "--ci-grid", "0:1:21", "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    validate_result(res)
    assert "confidence_set" in res
    code = main(["iv", "--input", str(data), "--outcome", "yvar",
                 "--treatment", "treat", "--instruments", "z_1,z_2",
                 "--controls", "c_1", "--beta0", "0.5", "--wald",
                 "--out", str(out)])
    assert code == 0


def test_varcomp_subcommand(tmp_path):
    import pandas as pd

    rng = np.random.default_rng(5)
    worker = np.repeat(np.arange(6), 4)
    firm = rng.integers(0, 3, size=24)
    firm = np.repeat(rng.integers(0, 3, size=12), 2)
    y = rng.standard_normal(24)
    pd.DataFrame({"worker": worker, "firm": firm, "y": y}).to_csv(
        tmp_path / "wf.csv", index=False)
    out = tmp_path / "vc.json"
    code = main(["varcomp", "--input", str(tmp_path / "wf.csv"),
                 "--worker-col", "worker", "--firm-col", "firm",
                 "--target", "psi", "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    validate_result(res)


def test_diagnose_subcommand(tmp_path):
    design, _, data, _ = _fixture_design(tmp_path, seed=6)
    out = tmp_path / "diag.json"
    code = main(["diagnose", "--input", str(data), "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    assert res["diagnostics"]["lambda_n"] <= 1.0 + 1e-12
    assert res["violators"] == []


def test_simulate_round_trip(tmp_path):
    out = tmp_path / "report.json"
    curves = tmp_path / "curves.csv"
    dump = tmp_path / "dump"
    code = main(["simulate", "--design", "1", "--dims", "50", "--reps", "2",
                 "--seed", "3", "--methods", "l3co", "--out", str(out),
                 "--curves", str(curves), "--dump-data", str(dump),
                 "--dump-reps", "1"])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["reps_done"] == 2
    assert curves.read_text().startswith("design,method,alpha")

    # the dumped replication reproduces the in-process point estimate
    from clusterqf.simulation import generate_design1
    from clusterqf.design import read_design_csv
    from clusterqf.projection import ProjectionWorkspace
    from clusterqf.quadform import QuadFormEngine, QuadFormTarget

    problem, beta = generate_design1(50, 0, 3)
    theta_inproc = problem.xby - beta * problem.xbx
    dumped = read_design_csv(dump / "data_rep0.csv")
    A0 = np.loadtxt(dump / "a0_rep0.csv", delimiter=",")
    eng = QuadFormEngine(ProjectionWorkspace(dumped),
                         QuadFormTarget.from_dense(A0))
    assert eng.theta_leaveout() == pytest.approx(theta_inproc, abs=1e-12)


def test_simulate_requires_seed(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--design", "1", "--reps", "1"])


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clusterqf.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "estimate" in proc.stdout


def test_diagnose_on_design1_dump(tmp_path):
    from clusterqf.simulation import generate_design1
    from clusterqf.projection import ProjectionWorkspace, leverage_diagnostics

    problem, beta = generate_design1(50, 0, 21)
    rep = leverage_diagnostics(problem.workspace, pair_budget=300,
                               triple_budget=300, seed=0)
    assert np.isfinite(rep.lambda_n) and np.isfinite(rep.phi_n)
    assert rep.lambda_n < 1.0
    assert rep.min_eig_S_pairs is not None and rep.min_eig_S_triples is not None
