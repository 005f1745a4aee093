import json

import numpy as np
import pytest

from app.services.common import read_csv


def _invoke(runner, cli, *args):
    return runner.invoke(cli, [str(arg) for arg in args], catch_exceptions=False)


def _load(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_unknown_config_key_exits_with_config_error(cli, runner, write_config, tmp_path):
    path = write_config({"bath": {"omega0_e01_multipel": 1.2}})

    result = _invoke(runner, cli, "fit-bath", "--config", path, "--out", tmp_path / "out")

    assert result.exit_code == 2
    assert "bath.omega0_e01_multipel" in result.output
    assert not (tmp_path / "out").exists()


def test_malformed_and_missing_config_files(cli, runner, tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("[1, 2", encoding="utf-8")

    malformed = _invoke(runner, cli, "evolve", "--config", broken)
    missing = _invoke(runner, cli, "scan", "--config", tmp_path / "nope.json")

    assert malformed.exit_code == 2
    assert missing.exit_code == 2
    assert "not found" in missing.output


def test_numeric_failure_exits_with_code_three(cli, runner, write_config, small_config, tmp_path):
    small_config["modes"] = {"fit_gate": 1e-12}
    path = write_config(small_config)

    result = _invoke(runner, cli, "fit-bath", "--config", path, "--out", tmp_path / "out")

    assert result.exit_code == 3
    assert "error:" in result.output
    assert "exceeds gate" in result.output


def test_fit_bath_writes_fit_and_spectra(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    path = write_config(small_config)

    result = _invoke(runner, cli, "fit-bath", "--config", path, "--out", out)

    assert result.exit_code == 0, result.output
    fit = _load(out / "bath_fit.json")
    assert len(fit["terms"]) == 2
    assert len(fit["modes"]) == 3
    assert fit["rms_residual"] < 0.05
    assert fit["e01"] == pytest.approx(np.sqrt(5.0) - 1.0)
    assert fit["config"]["system"]["n"] == 2
    header, rows = read_csv(out / "spectra.csv")
    assert header == [
        "omega",
        "S_target",
        "S_exact",
        "S_a1",
        "S_a2",
        "S_a3",
        "S_fit",
        "T_a1",
        "T_fit",
    ]
    assert rows.shape == (400, 9)
    assert np.max(np.abs(rows[:, 1] - rows[:, 2])) <= 1e-6


def test_output_formats_limit_written_files(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    small_config["output"] = {"formats": ["json"]}
    path = write_config(small_config)

    result = _invoke(runner, cli, "fit-bath", "--config", path, "--out", out)

    assert result.exit_code == 0, result.output
    assert (out / "bath_fit.json").exists()
    assert not (out / "spectra.csv").exists()


def test_evolve_full_model_writes_trajectory(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    path = write_config(small_config)

    result = _invoke(runner, cli, "evolve", "--config", path, "--model", "full", "--out", out)

    assert result.exit_code == 0, result.output
    header, rows = read_csv(out / "trajectory_full.csv")
    assert header[:5] == ["time", "energy_error", "fidelity", "trace_dev", "herm_dev"]
    np.testing.assert_allclose(rows[:, 0], np.linspace(0.0, 2.0, 5))
    assert np.all((rows[:, 2] >= 0) & (rows[:, 2] <= 1))
    assert rows[:, 3].max() <= 1e-6
    summary = _load(out / "summary_full.json")
    assert summary["model"] == "full"
    assert summary["final_fidelity"] == pytest.approx(rows[-1, 2])
    assert summary["ground"]["degeneracy"] == 1
    assert summary["segments"][0]["scale"] == 1.0
    assert 0 <= summary["references"]["hybridized_fidelity"] <= 1
    assert "final fidelity" in result.output


def test_evolve_single_and_bms_models(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    path = write_config(small_config)

    single = _invoke(runner, cli, "evolve", "--config", path, "--model", "single", "--out", out)
    bms = _invoke(
        runner,
        cli,
        "evolve",
        "--config",
        path,
        "--model",
        "bms",
        "--spectrum",
        "resonant",
        "--out",
        out,
    )

    assert single.exit_code == 0, single.output
    assert bms.exit_code == 0, bms.output
    assert (out / "trajectory_single.csv").exists()
    summary = _load(out / "summary_bms_resonant.json")
    assert summary["spectrum"] == "resonant"
    assert summary["transitions"] > 0
    assert summary["references"]["t_eff_regime"] == "finite"


def test_scan_point_matches_direct_evolution(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    small_config["scan"]["omega0_grid"] = [1.2]
    path = write_config(small_config)

    evolved = _invoke(runner, cli, "evolve", "--config", path, "--out", out)
    scanned = _invoke(runner, cli, "scan", "--config", path, "--out", out)

    assert evolved.exit_code == 0, evolved.output
    assert scanned.exit_code == 0, scanned.output
    _, final = read_csv(out / "scan_final.csv")
    summary = _load(out / "summary_full.json")
    assert final[0, 1] == pytest.approx(summary["final_fidelity"], abs=1e-12)


def test_scan_writes_grid_with_parallel_jobs(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    path = write_config(small_config)

    result = _invoke(runner, cli, "scan", "--config", path, "--jobs", 2, "--out", out)

    assert result.exit_code == 0, result.output
    header, grid = read_csv(out / "scan_grid.csv")
    assert header == ["omega0", "time", "fidelity"]
    assert grid.shape == (10, 3)
    e01 = np.sqrt(5.0) - 1.0
    np.testing.assert_allclose(np.unique(grid[:, 0]), [e01, 1.2 * e01])
    summary = _load(out / "scan_summary.json")
    _, final = read_csv(out / "scan_final.csv")
    assert summary["best_fidelity"] == pytest.approx(final[:, 1].max())


def test_extrapolate_writes_sweep_and_continuation(
    cli, runner, write_config, small_config, tmp_path
):
    out = tmp_path / "out"
    path = write_config(small_config)

    result = _invoke(runner, cli, "extrapolate", "--config", path, "--out", out)

    assert result.exit_code == 0, result.output
    header, sweep = read_csv(out / "sweep.csv")
    assert header == ["lambda_bar", "observable"]
    np.testing.assert_allclose(sweep[:, 0], [0.0, 0.25, 0.5, 0.75, 1.0])
    continuation = _load(out / "continuation.json")
    assert len(continuation["coeffs"]) == 3
    assert continuation["exact_interpolation"] is False
    assert continuation["deviation"] == pytest.approx(
        abs(continuation["continued_real"] - continuation["direct_reference"])
    )
    assert not (out / "error_table.csv").exists()
    assert "continued <H_s>" in result.output


def test_extrapolate_error_table(cli, runner, write_config, small_config, tmp_path):
    out = tmp_path / "out"
    small_config["sweep"]["error_table"] = {"n_values": [2, 3], "m_values": [1, 2]}
    small_config["sweep"]["t_obs"] = 0.5
    small_config["sweep"]["direct_reference"] = False
    path = write_config(small_config)

    result = _invoke(runner, cli, "extrapolate", "--config", path, "--out", out)

    assert result.exit_code == 0, result.output
    assert "deviation" not in _load(out / "continuation.json")
    header, table = read_csv(out / "error_table.csv")
    assert header[:2] == ["n_sites", "poly_order"]
    assert table[:, :2].tolist() == [[2, 1], [2, 2], [3, 1], [3, 2]]
    assert np.all(table[:, 5] >= 0)
