import csv

import pytest

from tracefem import benchmark, cli
from tracefem.errors import GeometryError, SolverError


def test_run_smoke_writes_csv(tmp_path):
    out = tmp_path / "run.csv"
    code = cli.main(["run", "--degree", "1", "--stab", "nv", "--lambda", "1.0",
                     "--mode", "uniform", "--cycles", "1", "--n0", "8",
                     "--out", str(out)])
    assert code == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["cycle", "dofs", "l2_error", "h1_error", "estimator",
                       "I1", "I2", "I3", "cg_iters", "wall_seconds"]
    assert len(rows) == 2


def test_config_error_exit_code(capsys):
    assert cli.main(["run", "--theta", "1.5", "--cycles", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_solver_failure_exit_code(monkeypatch, capsys):
    def boom(config, progress=None):
        raise SolverError("did not converge")

    monkeypatch.setattr(benchmark, "run", boom)
    assert cli.main(["run", "--cycles", "1"]) == 3
    assert "solver failure" in capsys.readouterr().err


def test_geometry_failure_exit_code(monkeypatch, capsys):
    def boom(config, progress=None):
        raise GeometryError("degenerate cut")

    monkeypatch.setattr(benchmark, "run", boom)
    assert cli.main(["run", "--cycles", "1"]) == 4
    assert "geometry failure" in capsys.readouterr().err


def test_rejects_unknown_degree():
    with pytest.raises(SystemExit):
        cli.main(["run", "--degree", "3"])


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
