import json
import subprocess
import sys

import pytest

from turnpike.cli import RunConfig, main, parse_config
from turnpike.errors import ConfigError


def call(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, (json.loads(cap.out) if cap.out else None), (json.loads(cap.err) if cap.err else None)


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    monkeypatch.delenv("TURNPIKE_OUT", raising=False)
    return tmp_path / "out"


def test_list(capsys, outdir):
    code, rep, _ = call(capsys, "list", "--output", str(outdir))
    assert code == 0
    assert {"toy", "toy_noy", "zermelo", "runner", "cubic"} <= set(rep["problems"])


def test_check_toy(capsys, outdir):
    code, rep, _ = call(capsys, "check", "--problem", "toy", "--output", str(outdir))
    assert code == 0
    diag = rep["diagnostics"]
    assert diag["nu"] == pytest.approx(1.0, abs=1e-10)
    assert diag["R_min_eig"] == pytest.approx(1.0, abs=1e-10)
    assert (outdir / "check_toy.json").exists()


def test_static_cubic_multistart(capsys, outdir):
    code, rep, _ = call(capsys, "static", "--problem", "cubic", "--params", "u_d=3.47197", "--multistart", "true",
                        "--output", str(outdir))
    assert code == 0
    xs = sorted(r["x"][0] for r in rep["records"])
    assert len(xs) == 2
    assert xs[0] == pytest.approx(-1.347372066, abs=1e-6)
    assert xs[1] == pytest.approx(0.5939615956, abs=1e-6)


def test_sweep_toy_linear(capsys, outdir):
    code, rep, _ = call(capsys, "sweep", "--problem", "toy", "--T", "10,20,40,80", "--output", str(outdir))
    assert code == 0
    assert rep["classification"] == "linear"
    csv = (outdir / "sweep_toy_shooting2.csv").read_text().splitlines()
    assert csv[0] == "T,plateau,plateau_T,nu_hat" and len(csv) == 5


def test_solve_writes_csv(capsys, outdir):
    code, rep, _ = call(capsys, "solve", "--problem", "toy", "--T", "10", "--output", str(outdir))
    assert code == 0
    (run,) = rep["runs"]
    lines = open(run["csv"]).read().splitlines()
    assert lines[0] == "t,x_1,y_1,u_1,px_1,py_1,H"
    assert len(lines) == 1 + 501
    assert rep["timings"] is None


def test_runs_are_byte_identical(capsys, outdir):
    argv = ("solve", "--problem", "toy", "--T", "10", "--method", "direct", "--N", "100", "--output", str(outdir))
    main(list(argv))
    first = capsys.readouterr().out
    csv1 = (outdir / "solve_toy_direct_T10.csv").read_bytes()
    main(list(argv))
    assert capsys.readouterr().out == first
    assert (outdir / "solve_toy_direct_T10.csv").read_bytes() == csv1


def test_env_overrides_output(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("TURNPIKE_OUT", str(tmp_path / "env"))
    code, rep, _ = call(capsys, "check", "--problem", "toy", "--output", str(tmp_path / "flag"))
    assert code == 0
    assert (tmp_path / "env" / "check_toy.json").exists()
    assert not (tmp_path / "flag").exists()


def test_config_file_with_flag_override(tmp_path, outdir):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"problem": "toy", "T": [10, 20], "method": "direct", "N": 100,
                               "tol_pg": 1e-7, "seed": 7}))
    sub, rc = parse_config(["solve", "--config", str(cfg), "--N", "200", "--params", "x0=0.5"])
    assert sub == "solve" and isinstance(rc, RunConfig)
    assert rc.N == 200 and rc.method == "direct" and rc.T == [10, 20] and rc.seed == 7
    assert rc.params == {"x0": "0.5"} or rc.params == {"x0": 0.5}
    assert rc.tolerances["tol_pg"] == 1e-7


@pytest.mark.parametrize("argv", [
    ["solve", "--problem", "runner", "--method", "shooting"],
    ["solve", "--problem", "zermelo", "--method", "shooting2"],
    ["solve", "--problem", "toy", "--N", "5", "--method", "direct"],
    ["solve", "--problem", "toy", "--T", "-1"],
    ["solve", "--problem", "nope"],
    ["frobnicate"],
    ["solve", "--problem", "toy", "--N", "many"],
    ["sweep", "--problem", "toy", "--T", "10,20"],
])
def test_validation_errors_exit_2(capsys, outdir, argv):
    code, rep, err = call(capsys, *argv, "--output", str(outdir))
    assert code == 2 and rep is None
    assert err["exit_code"] == 2 and err["error"]


def test_no_convergence_exits_3(capsys, outdir):
    code, _, err = call(capsys, "solve", "--problem", "toy", "--T", "20", "--method", "direct", "--N", "200",
                        "--max_outer", "1", "--output", str(outdir))
    assert code == 3 and err["error"] == "NoConvergence"
    assert err["residual"] > 0


def test_assumption_violation_exits_4(capsys, outdir):
    code, _, err = call(capsys, "check", "--problem", "runner", "--output", str(outdir))
    assert code == 4 and err["exit_code"] == 4


def test_validate_rejects_shooting_for_saturating_problems():
    with pytest.raises(ConfigError):
        RunConfig(problem="runner", method="shooting").validate()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "turnpike", "list", "--output", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "toy" in json.loads(proc.stdout)["problems"]
