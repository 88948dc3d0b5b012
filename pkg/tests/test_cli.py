import json
from pathlib import Path

import numpy as np
import pytest

from mfclab.cli import (
    ConfigError,
    apply_overrides,
    build_grid,
    build_model,
    build_mu0,
    build_sim_config,
    config_hash,
    main,
    parse_config,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_cfg(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return path


MINI = """
# minimal simulate experiment
model.hamiltonian = "quadratic"
model.T = 0.1
constraint.kind = "soft_abs"
constraint.kappa = 0.75
mu0.std = 0.25
grid.x_min = -6.0
grid.x_max = 6.0
grid.n_cells = 100
grid.n_steps = 100
policy.kind = "zero"
particle.dim = 1
particle.initial = "quantile"
particle.seed = 11
particle.dt = 0.001
particle.n = 4
particle.runs = 3
particle.stop_threshold = -0.2
"""


class TestConfig:
    def test_parse_types(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, 'a.b = 1\na.c = [1, 2.5]\nname = "x"  # comment\n'))
        assert cfg == {"a.b": 1, "a.c": [1, 2.5], "name": "x"}

    def test_parse_error(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_cfg(tmp_path, "no equals sign\n"))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            parse_config("/nonexistent/file.cfg")

    def test_overrides(self):
        cfg = apply_overrides({"a.b": 1}, ["a.b=2", 'a.c="z"'])
        assert cfg == {"a.b": 2, "a.c": "z"}

    def test_hash_stability(self):
        h1 = config_hash({"a": 1, "b": 2})
        h2 = config_hash({"b": 2, "a": 1})
        assert h1 == h2
        assert h1 != config_hash({"a": 1, "b": 3})

    def test_seed_required(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINI.replace("particle.seed = 11\n", "")))
        grid = build_grid(cfg)
        with pytest.raises(ConfigError):
            build_sim_config(cfg, 4, build_mu0(cfg, grid))

    def test_builders(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINI))
        grid = build_grid(cfg)
        model = build_model(cfg)
        mu0 = build_mu0(cfg, grid)
        sim = build_sim_config(cfg, 4, mu0)
        assert grid.n_cells == 100
        assert model.constraint.kappa == 0.75
        assert sim.n_particles == 4


class TestMain:
    def test_config_error_exit_1(self, tmp_path, capsys):
        bad = write_cfg(tmp_path, "nonsense\n")
        assert main(["simulate", str(bad)]) == 1

    def test_missing_config_exit_1(self):
        assert main(["simulate", "/no/such/file.cfg"]) == 1

    def test_simulate_writes_artifacts(self, tmp_path):
        cfg_path = write_cfg(tmp_path, MINI)
        out = tmp_path / "out"
        assert main(["simulate", str(cfg_path), "--out-dir", str(out)]) == 0
        summary = (out / "simulate_summary.csv").read_text()
        assert summary.startswith("# mfclab")
        assert "# config" in summary
        runs = (out / "simulate_runs.csv").read_text()
        assert len(runs.strip().split("\n")) == 3 + 3  # 2 header comments + columns + 3 rows

    def test_byte_identical_rerun(self, tmp_path):
        cfg_path = write_cfg(tmp_path, MINI)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["simulate", str(cfg_path), "--out-dir", str(out1)]) == 0
        assert main(["simulate", str(cfg_path), "--out-dir", str(out2)]) == 0
        for name in ("simulate_summary.csv", "simulate_runs.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_set_override_changes_output(self, tmp_path):
        cfg_path = write_cfg(tmp_path, MINI)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["simulate", str(cfg_path), "--out-dir", str(out1)]) == 0
        assert main(["simulate", str(cfg_path), "--out-dir", str(out2),
                     "--set", "particle.seed=12"]) == 0
        a = (out1 / "simulate_runs.csv").read_text()
        b = (out2 / "simulate_runs.csv").read_text()
        assert a != b

    def test_trajectory_dump(self, tmp_path):
        cfg_path = write_cfg(tmp_path, MINI)
        out = tmp_path / "out"
        assert main(["simulate", str(cfg_path), "--out-dir", str(out),
                     "--dump-trajectories"]) == 0
        lines = (out / "trajectories.ndjson").read_text().strip().split("\n")
        header = json.loads(lines[0])
        assert "config" in header
        rec = json.loads(lines[1])
        assert set(rec) == {"run", "step", "time", "psi", "cost_so_far"}
        # 3 runs x 101 steps + header
        assert len(lines) == 1 + 3 * 101

    def test_selftest_passes(self, tmp_path, capsys):
        assert main(["selftest", str(CONFIGS / "selftest.cfg"),
                     "--out-dir", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "FAIL" not in out

    def test_constant_policy(self, tmp_path):
        cfg_path = write_cfg(tmp_path, MINI.replace(
            'policy.kind = "zero"', 'policy.kind = "constant"\npolicy.vector = [0.3]'))
        out = tmp_path / "out"
        assert main(["simulate", str(cfg_path), "--out-dir", str(out)]) == 0
        summary = (out / "simulate_summary.csv").read_text().strip().split("\n")[-1]
        mean_cost = float(summary.split(",")[1])
        assert mean_cost == pytest.approx(0.5 * 0.3**2 * 0.1, rel=1e-12)

    def test_numerical_failure_exit_2(self, tmp_path):
        # an active constraint with an absurd iteration budget leaves the
        # sweep unconverged -> exit 2
        text = MINI.replace("constraint.kappa = 0.75", "constraint.kappa = 0.25")
        text += '\nsolver.deltas = [0.1]\nsolver.eps = 0.001\nsolver.k_max = 2\n'
        assert main(["stability", str(write_cfg(tmp_path, text)), "--out-dir", str(tmp_path / "s")]) == 2

    def test_shipped_configs_parse(self):
        for name in ("stability.cfg", "transfer.cfg", "ldp.cfg", "simulate.cfg"):
            cfg = parse_config(CONFIGS / name)
            build_model(cfg)
            build_grid(cfg)
