import csv
import subprocess
import sys

import numpy as np
import pytest

from kktsylv.cli import (
    CONVERGENCE_COLUMNS,
    REPORT_COLUMNS,
    ConfigError,
    build_problem,
    load_config,
    main,
)
from kktsylv.linalg import read_matrix_market, write_matrix_market
from kktsylv.residual import dense_residuals


def read_csv(path):
    with open(path) as fh:
        header = fh.readline()
        assert header.startswith("# kktsylv ")
        return list(csv.DictReader(fh))


def write_config(path, text):
    path.write_text(text)
    return path


SMALL = ["--set", "problem.level=3", "--set", "problem.n_T=10"]


class TestConfig:
    def test_sections_and_overrides(self, tmp_path):
        cfg_file = write_config(tmp_path / "run.ini", """
[problem]
pde = convection_diffusion
level = 4
eps = 0.5
beta = 1e-3

[solver]
tol = 1e-5
truncation = threshold

[sweep]
beta = 1e-1, 1e-3
truncation = off, 1e-10
""")
        cfg = load_config(cfg_file, ["problem.level=3", "n_T=7", "mode=sweep"])
        assert cfg.problem.pde == "convection_diffusion"
        assert cfg.problem.level == 3 and cfg.problem.n_T == 7
        assert cfg.problem.eps == 0.5 and cfg.problem.beta == 1e-3
        assert cfg.solver.tol == 1e-5 and cfg.solver.truncation == "threshold"
        assert cfg.sweep == {"beta": [0.1, 0.001], "truncation": ["off", 1e-10]}
        assert cfg.mode == "sweep"
        cfg.validate()

    @pytest.mark.parametrize("override", [
        "problem.colour=red", "nosuchkey=1", "problem.level=five", "novalue",
        "sweep.speed=1,2", "extra.key=1", "problem.boundary_control=maybe",
    ])
    def test_bad_overrides(self, override):
        with pytest.raises(ConfigError):
            load_config(None, [override])

    def test_inline_comments(self, tmp_path):
        cfg_file = write_config(tmp_path / "run.ini", """
[problem]
pde = heat        ; heat | convection_diffusion
domain =          ; default
n_T = 12          # steps
""")
        cfg = load_config(cfg_file)
        assert cfg.problem.pde == "heat" and cfg.problem.domain is None and cfg.problem.n_T == 12

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.ini")

    @pytest.mark.parametrize("override", [
        "solver.tol=1e-12", "solver.tol=1", "problem.beta=0", "problem.pde=wave",
        "run.workers=0", "run.export=pdf", "solver.threshold=2", "run.mode=walk",
    ])
    def test_validation(self, override):
        with pytest.raises(ConfigError):
            load_config(None, [override]).validate()

    def test_sweep_needs_axes(self):
        with pytest.raises(ConfigError):
            load_config(None, ["run.mode=sweep"]).validate()

    def test_default_domains(self):
        cfg = load_config(None, ["problem.level=2", "problem.n_T=3"])
        assert build_problem(cfg.problem).case.value == "i"
        cfg = load_config(None, ["problem.level=2", "problem.n_T=3", "pde=convection_diffusion"])
        op = build_problem(cfg.problem)
        assert op.case.value == "iv" and op.M.diagonal().sum() == pytest.approx(4.0)


class TestRun:
    def test_solve_heat(self, tmp_path):
        out = tmp_path / "out"
        code = main(["solve", "--set", "problem.level=5", "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "report.csv")
        assert list(rows[0]) == REPORT_COLUMNS
        assert rows[0]["converged"] == "True"
        assert int(rows[0]["n"]) == 1089 and int(rows[0]["p"]) <= 15
        conv = read_csv(out / "convergence.csv")
        assert list(conv[0]) == CONVERGENCE_COLUMNS
        assert len(conv) == int(rows[0]["iterations"])
        for name in ("Y", "L", "U"):
            for side in ("left", "right"):
                assert (out / f"solution_{name}_{side}.mm").exists()

    def test_exports_reproduce_residuals(self, tmp_path):
        out = tmp_path / "out"
        assert main(["solve", *SMALL, "--set", "problem.unobserved=8", "--out", str(out)]) == 0
        cfg = load_config(None, ["problem.level=3", "problem.n_T=10", "problem.unobserved=8"])
        op = build_problem(cfg.problem)
        load = lambda name: read_matrix_market(out / name).toarray()
        Y = load("solution_Y_left.mm") @ load("solution_Y_right.mm")
        L = load("solution_L_left.mm") @ load("solution_L_right.mm")
        R1, R2 = dense_residuals(op, Y, L)
        last = read_csv(out / "convergence.csv")[-1]
        assert np.linalg.norm(R1) == pytest.approx(float(last["r1"]), rel=1e-10)
        assert np.linalg.norm(R2) == pytest.approx(float(last["r2"]), rel=1e-10)

    def test_both_mode(self, tmp_path):
        out = tmp_path / "out"
        assert main(["both", *SMALL, "--set", "problem.n_T=20", "--out", str(out)]) == 0
        row = read_csv(out / "report.csv")[0]
        assert float(row["oracle_rel_err"]) <= 10 * 1e-4

    def test_oracle_mode(self, tmp_path):
        out = tmp_path / "out"
        assert main(["oracle", *SMALL, "--set", "run.export=dense", "--out", str(out)]) == 0
        row = read_csv(out / "report.csv")[0]
        assert row["message"] == "direct solve"
        Y = read_matrix_market(out / "oracle_Y.mm")
        assert Y.shape == (81, 10)

    def test_accuracy_floor_exit(self, tmp_path, capsys):
        code = main(["solve", *SMALL, "--set", "solver.tol=1e-12", "--out", str(tmp_path)])
        assert code == 1
        assert "sqrt(machine epsilon)" in capsys.readouterr().err

    def test_not_converged_exit(self, tmp_path):
        code = main(["solve", *SMALL, "--set", "solver.max_iters=1", "--set", "solver.tol=1e-8",
                     "--out", str(tmp_path)])
        assert code == 2
        assert read_csv(tmp_path / "report.csv")[0]["converged"] == "False"

    def test_assembly_error_exit(self, tmp_path, capsys):
        code = main(["solve", *SMALL, "--set", "problem.unobserved=100000", "--out", str(tmp_path)])
        assert code == 1
        assert "assembly error" in capsys.readouterr().err

    def test_oracle_guard_exit(self, tmp_path, capsys):
        code = main(["oracle", "--set", "problem.level=8", "--out", str(tmp_path)])
        assert code == 1
        assert "oracle guard" in capsys.readouterr().err

    def test_from_file_target(self, tmp_path, rng):
        write_matrix_market(tmp_path / "y1.mm", rng.standard_normal((81, 2)))
        write_matrix_market(tmp_path / "y2.mm", rng.standard_normal((10, 2)))
        cfg_file = write_config(tmp_path / "run.ini", f"""
[problem]
level = 3
n_T = 10
desired_state = from_file
desired_Y1 = {tmp_path / 'y1.mm'}
desired_Y2 = {tmp_path / 'y2.mm'}
""")
        assert main(["solve", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 0

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "kktsylv.cli", "solve", *SMALL, "--out", str(tmp_path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr


class TestSweep:
    def test_beta_by_level(self, tmp_path):
        cfg_file = write_config(tmp_path / "s.ini", """
[problem]
n_T = 10

[sweep]
beta = 1e-1, 1e-3, 1e-5
level = 2, 3, 4
""")
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(cfg_file), "--out", str(out)]) == 0
        rows = read_csv(out / "report.csv")
        assert len(rows) == 9
        # axes iterate in a fixed order: level outermost, then beta
        assert [(int(r["n"]), float(r["beta"])) for r in rows] == [
            (n, b) for n in (25, 81, 289) for b in (0.1, 1e-3, 1e-5)]
        assert [int(r["run"]) for r in rows] == list(range(9))
        assert (out / "run8_solution_Y_left.mm").exists()

    def test_partial_observation_grid(self, tmp_path):
        cfg_file = write_config(tmp_path / "s.ini", """
[problem]
level = 4
n_T = 20

[run]
export = none

[sweep]
unobserved = 0, 10, 30, 50, 70, 90
truncation = off, 1e-12, 1e-10
""")
        out = tmp_path / "out"
        assert main(["sweep", "--config", str(cfg_file), "--out", str(out), "--workers", "2"]) == 0
        rows = read_csv(out / "report.csv")
        assert len(rows) == 18
        assert [r["truncation"] for r in rows[:3]] == ["off", "1e-12", "1e-10"]
        assert all(r["converged"] == "True" for r in rows)

    def test_rerun_is_identical(self, tmp_path):
        cfg_file = write_config(tmp_path / "s.ini", """
[problem]
level = 3
n_T = 10
pde = convection_diffusion

[sweep]
eps = 1, 0.1
beta = 1e-2, 1e-4
""")
        outs = []
        for i, workers in enumerate(("1", "2")):
            out = tmp_path / f"o{i}"
            assert main(["sweep", "--config", str(cfg_file), "--out", str(out), "--workers", workers]) == 0
            outs.append(out)
        for name, timing in (("report.csv", {"time_s"}), ("convergence.csv", {"wall_s"})):
            a, b = (read_csv(o / name) for o in outs)
            strip = lambda rows: [{k: v for k, v in r.items() if k not in timing} for r in rows]
            assert strip(a) == strip(b)

    def test_failed_cell_does_not_abort(self, tmp_path):
        cfg_file = write_config(tmp_path / "s.ini", """
[problem]
level = 2
n_T = 5

[sweep]
unobserved = 0, 1000, 3
""")
        out = tmp_path / "out"
        code = main(["sweep", "--config", str(cfg_file), "--out", str(out)])
        rows = read_csv(out / "report.csv")
        assert len(rows) == 3
        assert rows[1]["message"].startswith("assembly error")
        assert rows[0]["converged"] == rows[2]["converged"] == "True"
        assert code == 2

    def test_single_cell_equals_run(self, tmp_path):
        assert main(["solve", *SMALL, "--out", str(tmp_path / "a")]) == 0
        assert main(["sweep", *SMALL, "--set", "sweep.beta=1e-4", "--out", str(tmp_path / "b")]) == 0
        a = read_csv(tmp_path / "a" / "report.csv")[0]
        b = read_csv(tmp_path / "b" / "report.csv")[0]
        for k in ("n", "p", "r", "iterations", "converged"):
            assert a[k] == b[k]
