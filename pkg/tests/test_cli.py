import os

import numpy as np
import pytest
import yaml

from saltmpc.cli import ExperimentConfig, main


def _write_config(tmp_path, text):
    path = tmp_path / "exp.yaml"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestConfig:
    def test_roundtrip_byte_identical(self, tmp_path):
        config = ExperimentConfig()
        canonical = config.emit()
        path = _write_config(tmp_path, canonical)
        reparsed = ExperimentConfig.from_file(path)
        assert reparsed.emit() == canonical

    def test_partial_config_merges_defaults(self, tmp_path):
        path = _write_config(tmp_path, "variant: mpc\nseed: 9\n")
        config = ExperimentConfig.from_file(path)
        assert config.variant == "mpc"
        assert config.seed == 9
        assert config.schedule["dt"] == 0.02

    def test_unknown_key_rejected(self, tmp_path):
        path = _write_config(tmp_path, "varaint: mpc\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_file(path)

    def test_unknown_section_key_rejected(self, tmp_path):
        path = _write_config(tmp_path, "montecarlo:\n  nenvs: 3\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_file(path)

    def test_env_var_supplies_config(self, tmp_path, monkeypatch, capsys):
        path = _write_config(tmp_path, "variant: hmpc\n")
        monkeypatch.setenv("SALTMPC_CONFIG", path)
        code = main(["--emit-config", "solve"])
        assert code == 0
        out = capsys.readouterr().out
        assert yaml.safe_load(out)["variant"] == "hmpc"


class TestSolveCommand:
    def test_double_integrator_smoke(self, tmp_path):
        cfg = "\n".join([
            "model: double-integrator",
            "variant: mpc",
            "schedule: {horizon: 1.5, dt: 0.05}",
            "solver: {max_iters: 60, kkt_tol: 1.0e-6}",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        code = main(["--config", path, "--out", str(out), "solve"])
        assert code == 0
        traj = (out / "trajectory.csv").read_text().splitlines()
        assert traj[0].startswith("t,x0,x1,u0,P00,P11")
        assert len(traj) == 32  # header + 31 nodes
        diagfile = (out / "diagnostics.csv").read_text().splitlines()
        assert diagfile[0] == "iteration,kkt_residual,step_size"

    def test_biped_backoff_columns_near_contacts(self, tmp_path):
        cfg = "\n".join([
            "model: planar-biped",
            "variant: gs-smpc",
            "schedule: {horizon: 0.8, dt: 0.02, t0_index: 4}",
            "solver: {max_iters: 40, kkt_tol: 1.0e-5}",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        code = main(["--config", path, "--out", str(out), "solve"])
        assert code in (0, 2)
        lines = (out / "trajectory.csv").read_text().splitlines()
        header = lines[0].split(",")
        col = header.index("beta_height-min[0]")
        betas = [float(line.split(",")[col]) for line in lines[1:]]
        assert max(b for b in betas if not np.isnan(b)) > 1e-3

    def test_malformed_config_no_partial_output(self, tmp_path):
        path = _write_config(tmp_path, "schedule: [broken\n")
        out = tmp_path / "out"
        code = main(["--config", path, "--out", str(out), "solve"])
        assert code == 1
        assert not out.exists()

    def test_missing_config_file(self, tmp_path):
        out = tmp_path / "out"
        code = main(["--config", str(tmp_path / "nope.yaml"), "--out", str(out),
                     "solve"])
        assert code == 1


class TestCovcompareCommand:
    def test_row_counts_from_sweep(self, tmp_path):
        cfg = "\n".join([
            "model: planar-biped",
            "covcompare:",
            "  motions: [forward]",
            "  guard_cov_values: [1.0e-4, 1.0e-3, 1.0e-2]",
            "  sigma_values: [1.0e-3]",
            "  horizon_nodes: 60",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        code = main(["--config", path, "--out", str(out), "covcompare"])
        assert code == 0
        lines = (out / "covcompare.csv").read_text().splitlines()
        # per state dimension: 3 sweeps x methods (a),(b) -> 6 rows
        z_rows = [l for l in lines[1:] if l.split(",")[3] == "z"
                  and l.split(",")[1] in ("a", "b")]
        assert len(z_rows) == 6
        assert (out / "plot_covcompare.py").exists()

    def test_empty_sweep_empty_table(self, tmp_path):
        cfg = "\n".join([
            "covcompare:",
            "  motions: []",
            "  guard_cov_values: []",
            "  sigma_values: []",
            "  horizon_nodes: 40",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        code = main(["--config", path, "--out", str(out), "covcompare"])
        assert code == 0
        lines = (out / "covcompare.csv").read_text().splitlines()
        assert len(lines) == 1  # header only


class TestMontecarloCommand:
    def test_seeded_runs_byte_identical(self, tmp_path):
        cfg = "\n".join([
            "seed: 123",
            "montecarlo:",
            "  n_envs: 2",
            "  duration: 0.8",
            "  offset_range: 0.04",
            "  violation_variants: [gs-smpc, mpc]",
        ])
        path = _write_config(tmp_path, cfg)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["--config", path, "--out", str(out1), "montecarlo"]) == 0
        assert main(["--config", path, "--out", str(out2), "montecarlo"]) == 0
        assert (out1 / "montecarlo.csv").read_bytes() == \
            (out2 / "montecarlo.csv").read_bytes()

    def test_zero_disturbance_all_succeed(self, tmp_path):
        cfg = "\n".join([
            "montecarlo:",
            "  n_envs: 1",
            "  duration: 0.8",
            "  offset_range: 0.0",
            "  violation_variants: [gs-smpc, smpc, hmpc, mpc]",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert main(["--config", path, "--out", str(out), "montecarlo"]) == 0
        lines = (out / "montecarlo.csv").read_text().splitlines()
        assert len(lines) == 5
        for line in lines[1:]:
            assert line.split(",")[2] == "1"


class TestBenchCommand:
    def test_repetition_count_in_rows(self, tmp_path):
        cfg = "\n".join([
            "bench:",
            "  repetitions: 4",
            "  horizon_nodes: 20",
            "  warm_iters: 2",
        ])
        path = _write_config(tmp_path, cfg)
        out = tmp_path / "out"
        assert main(["--config", path, "--out", str(out), "bench"]) == 0
        lines = (out / "bench.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 4
        summary = (out / "bench_summary.csv").read_text().splitlines()
        assert summary[-1].startswith("ratio,")
