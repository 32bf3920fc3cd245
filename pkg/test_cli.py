import csv
import json

import pytest

from cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from model_core import StatsSummary, load_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"retrieval_model": "ideal", "spatial_points": 64}), encoding="utf-8")
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_counts(tmp_path, config_file):
    out = tmp_path / "counts.csv"
    assert main(["simulate", "--config", str(config_file), "--trials", "500", "--seed", "3", "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert len(rows) == 500
    assert list(rows[0]) == ["trial", "s1", "s2", "as1", "as2"]
    assert [r["trial"] for r in rows[:3]] == ["0", "1", "2"]


def test_simulate_echoes_resolved_config(tmp_path, config_file, capsys):
    out = tmp_path / "counts.csv"
    main(["simulate", "--config", str(config_file), "--trials", "10", "--out", str(out)])
    err = capsys.readouterr().err
    assert '"optical_depth": 20.0' in err
    assert '"retrieval_model": "ideal"' in err


def test_simulate_is_byte_identical(tmp_path, config_file):
    outputs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        main(["simulate", "--config", str(config_file), "--trials", "2000", "--seed", "11", "--out", str(out)])
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_simulate_debug_latent_columns(tmp_path, config_file):
    out = tmp_path / "counts.csv"
    main(["simulate", "--config", str(config_file), "--trials", "50", "--out", str(out), "--debug-latent"])
    assert list(read_rows(out)[0]) == ["trial", "s1", "s2", "as1", "as2", "true_stokes", "true_spin", "retrieved"]


def test_zero_trials_exit_one(tmp_path, config_file):
    out = tmp_path / "counts.csv"
    assert main(["simulate", "--config", str(config_file), "--trials", "0", "--out", str(out)]) == EXIT_INVALID
    assert not out.exists()


def test_unknown_flag_exit_one(tmp_path):
    assert main(["simulate", "--trials", "10", "--out", str(tmp_path / "x.csv"), "--bogus"]) == EXIT_INVALID


def test_invalid_config_exit_one(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"stokes_efficiency": 1.2}), encoding="utf-8")
    assert main(["simulate", "--config", str(path), "--trials", "10", "--out", str(tmp_path / "x.csv")]) == EXIT_INVALID


def test_analyze_writes_summary(tmp_path, config_file):
    counts = tmp_path / "counts.csv"
    stats = tmp_path / "stats.json"
    main(["simulate", "--config", str(config_file), "--trials", "20000", "--out", str(counts)])
    assert main(["analyze", str(counts), "--out", str(stats), "--config", str(config_file)]) == EXIT_OK
    summary = StatsSummary.model_validate_json(stats.read_text(encoding="utf-8"))
    assert summary.trials == 20000
    assert summary.psn_th == summary.mean_s + summary.mean_as
    assert summary.zeta is not None
    assert summary.mean_as_slope is not None
    assert summary.corrected_q is not None


def test_analyze_rejects_missing_columns(tmp_path):
    counts = tmp_path / "counts.csv"
    counts.write_text("trial,s1,s2\n0,1,0\n", encoding="utf-8")
    assert main(["analyze", str(counts), "--out", str(tmp_path / "s.json")]) == EXIT_INVALID


def test_figure2a_one_file_per_rate(tmp_path, config_file):
    out_dir = tmp_path / "fig2a"
    assert main(["figure2a", "--config", str(config_file), "--rates", "0.005,0.02", "--out-dir", str(out_dir)]) == EXIT_OK
    files = sorted(out_dir.glob("*.csv"))
    assert len(files) == 2
    rows = read_rows(files[0])
    assert list(rows[0]) == ["t_us", "flux_per_us"]


def test_figure2c_width_falls_with_coupling(tmp_path, config_file):
    out = tmp_path / "fig2c.csv"
    assert main(["figure2c", "--config", str(config_file), "--couplings", "0.5,1,2", "--out", str(out)]) == EXIT_OK
    widths = [float(r["fwhm_us"]) for r in read_rows(out)]
    assert widths[0] > widths[1] > widths[2]


def test_figure2b_rows(tmp_path, config_file):
    out = tmp_path / "fig2b.csv"
    assert main(["figure2b", "--config", str(config_file), "--couplings", "1,2", "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert {r["coupling"] for r in rows} == {"1", "2"}


def test_figure3_rows(tmp_path, config_file):
    out = tmp_path / "fig3.csv"
    args = ["figure3", "--config", str(config_file), "--taus", "0,2,4", "--trials", "20000", "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = read_rows(out)
    assert [r["tau_d_us"] for r in rows] == ["0", "2", "4"]
    means = [float(r["mean_as"]) for r in rows]
    assert means[0] > means[1] > means[2]


def test_figure4_rows(tmp_path, config_file):
    out = tmp_path / "fig4.csv"
    assert main(["figure4", "--config", str(config_file), "--trials", "50000", "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert list(rows[0]) == ["n_s", "g2", "g2_err", "mean_as", "Q"]
    assert rows[0]["n_s"] == "0"
    summary = StatsSummary.model_validate_json(out.with_suffix(".json").read_text(encoding="utf-8"))
    assert summary.trials == 50000
    assert summary.mean_as_slope is not None
    assert summary.corrected_mean_as is not None
    assert summary.corrected_q is not None


def test_calibrate_prints_loadable_config(tmp_path, config_file):
    out = tmp_path / "calibrated.json"
    args = ["calibrate", "--config", str(config_file), "--targets", "ns=1.06,nas=0.36,V=0.942,zeta=0.3", "--out", str(out)]
    assert main(args) == EXIT_OK
    calibrated = load_config(out)
    assert calibrated.retrieval_model == "ideal"


def test_calibrate_accepts_nonclassical_delay(tmp_path):
    out = tmp_path / "calibrated.json"
    path = tmp_path / "many_modes.json"
    path.write_text(json.dumps({"retrieval_model": "ideal", "spatial_points": 64, "mode_count": 64}), encoding="utf-8")
    args = ["calibrate", "--config", str(path), "--targets", "ns=1.06,nas=0.36,V=0.942,tau_nc=1", "--out", str(out)]
    assert main(args) == EXIT_OK
    assert load_config(out).mode_count >= 64


def test_calibrate_unreachable_exit_two(config_file):
    args = ["calibrate", "--config", str(config_file), "--targets", "ns=1.06,nas=0.36,V=0.01"]
    assert main(args) == EXIT_FAILED


def test_oracle_check_tail_failure_exit_two(config_file):
    assert main(["oracle-check", "--config", str(config_file), "--trials", "100", "--n-max", "2"]) == EXIT_FAILED


def test_check_setup(capsys):
    assert main(["check-setup"]) == EXIT_OK
    assert "numpy" in capsys.readouterr().out
