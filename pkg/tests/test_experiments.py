from __future__ import annotations

import numpy as np
import pytest

from defectcv import cli
from defectcv.experiments import (COMMANDS, ConfigError, ExperimentConfig, ReferenceValue, load_config,
                                  parse_config_text, point_seed, run_1d_scaling, run_sweep_N)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nalpha = 2.5\nbeta=10  # inline\neta = 0.1:0.1:0.3\nrb-snapshots = 4 all\nn = 6 8\n")
    cfg = load_config(path, m=7)
    assert cfg.alpha == 2.5 and cfg.beta == 10.0 and cfg.m == 7
    assert cfg.eta == pytest.approx((0.1, 0.2, 0.3))
    assert cfg.n == (6, 8) and cfg.rb_snapshots == ("4", "all")
    assert load_config(path, alpha=4.0).alpha == 4.0


@pytest.mark.parametrize("text", ["bogus = 1", "alpha 3", "m = x", "eta = 1.5", "estimators = MC FOO",
                                  "alpha = -1", "entry = 3,1", "m = 1", "catalog = fast"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_serialize_roundtrip():
    cfg = ExperimentConfig(eta=(0.1, 0.25), n=(4, 6), entry=(1, 2), tol=1e-8).validate()
    values = parse_config_text(cfg.serialize())
    assert ExperimentConfig(**values) == cfg


def test_point_seed_stable():
    assert point_seed(0, 0.5, 10) == point_seed(0, 0.5, 10)
    assert point_seed(0, 0.5, 10) != point_seed(0, 0.5, 12)
    assert point_seed(0, 0.5, 10) == 0xF734ADDBC92B32B1


def test_reference_text_roundtrip():
    ref = ReferenceValue(50, 20, 2, 7, "CV3", np.array([[8.1, 0.01], [0.01, 8.2]]), np.full((2, 2), 0.05))
    back = ReferenceValue.from_text(ref.to_text())
    np.testing.assert_array_equal(back.value, ref.value)
    assert back.seed == 7 and back.estimator == "CV3"


def _run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


SMALL = ["--n", "4", "--m", "6", "--res", "2", "--seed", "3"]


@pytest.mark.parametrize("command", ["periodic", "catalog", "mc", "cv", "sweep-eta", "rb"])
def test_subcommands_run(tmp_path, capsys, command):
    extra = ["--rb-snapshots", "4", "all"] if command == "rb" else []
    extra += ["--eta", "0.3", "0.5"] if command == "sweep-eta" else []
    assert _run(tmp_path, command, *SMALL, *extra) == 0
    out = capsys.readouterr().out
    stem = command.replace("-", "_")
    assert (tmp_path / f"{stem}_report.txt").exists()
    assert "wrote" in out
    report = (tmp_path / f"{stem}_report.txt").read_text()
    assert "config.alpha = 3.0" in report


def test_cv_report_columns(tmp_path):
    assert _run(tmp_path, "cv", *SMALL, "--estimators", "MC", "CV1", "CV3", "--full-matrix") == 0
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert {"eta", "N", "entry", "mc_mean", "cv3_mean", "ratio_cv3"} <= set(header)
    assert len(lines) == 1 + 4
    batch = (tmp_path / "cv_batch_eta0.5_N4.csv").read_text().splitlines()
    assert batch[0].startswith("seed,defect_count,a11,a12,a22")
    assert len(batch) == 7


def test_outputs_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _run(d, "cv", *SMALL) == 0
    for name in ("cv.csv", "cv_report.txt", "cv_batch_eta0.5_N4.csv"):
        assert (a / name).read_text().replace(str(a), "") == (b / name).read_text().replace(str(b), "")


def test_sweep_n_with_given_reference(tmp_path):
    cfg = ExperimentConfig(n=(4, 5, 6), m=8, res=2, out=str(tmp_path), estimators=("MC", "CV1", "CV3"))
    ref = ReferenceValue(8, 8, 2, 0, "CV3", np.diag([8.4, 8.4]), np.full((2, 2), 0.1))
    res = run_sweep_N(cfg, reference=ref)
    assert [r["N"] for r in res.rows] == [4, 5, 6]
    assert {"rho1", "rho2", "rho3", "err_cv3"} <= set(res.rows[0])
    assert "slope_err_cv3" in res.summary and "slope_err_cv3_se" in res.summary


def test_sweep_n_cli_computes_reference(tmp_path):
    assert _run(tmp_path, "sweep-n", "--n", "4", "6", "--m", "5", "--res", "2", "--n-ref", "8", "--m-ref", "4") == 0
    report = (tmp_path / "sweep_n_report.txt").read_text()
    assert "reference_n = 8" in report
    assert list((tmp_path / "cache").glob("reference_*.txt"))


def test_scale_1d(tmp_path):
    cfg = ExperimentConfig(d=1, n=(4, 8, 16, 32, 64), m=2000, out=str(tmp_path))
    res = run_1d_scaling(cfg)
    assert res.summary["slope_cv3"] < res.summary["slope_cv1"] < res.summary["slope_mc"]
    assert (tmp_path / "scale_1d_variances.csv").exists()


@pytest.mark.parametrize("eta", ["0", "1"])
def test_scale_1d_degenerate_eta(tmp_path, eta):
    assert _run(tmp_path, "scale-1d", "--d", "1", "--eta", eta, "--n", "4", "8", "16", "32") == 0
    assert "deterministic" in (tmp_path / "scale_1d_report.txt").read_text()


def test_sweep_eta_rejects_endpoints(tmp_path):
    assert _run(tmp_path, "sweep-eta", *SMALL, "--eta", "0", "0.5") == 2


def test_cli_bad_values(tmp_path, capsys):
    assert _run(tmp_path, "mc", "--m", "many") == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["nonsense"])


def test_commands_registered():
    assert set(COMMANDS) == {"periodic", "catalog", "mc", "cv", "sweep-eta", "sweep-n", "rb", "scale-1d"}
