from pathlib import Path

import numpy as np
import pytest

from dfpt import cli
from dfpt.persistence import load_groundstate, load_response
from dfpt.reports import SOLVE_ROW, TOTAL_ROW, read_reports

MODEL = """
cell_length = 6.283185307179586
ecut = 10
potential = [(1, 0.3, 0.0), (-1, 0.3, 0.0), (2, 0.1, 0.05), (-2, 0.1, -0.05)]
"""

RUN = """
model = model.cfg
smearing = fermi-dirac
temperature = 0.01
n_el = 3
n_ex = 3
eigensolver_tol = 1e-11
perturbation = dv.cfg
tol = 1e-10
"""


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    (tmp_path / "model.cfg").write_text(MODEL)
    (tmp_path / "dv.cfg").write_text("potential = [(1, 0.05, 0.0), (-1, 0.05, 0.0)]\n")
    (tmp_path / "run.cfg").write_text(RUN)
    return tmp_path


def _main(run_dir: Path, *args: str, out: str = "out") -> int:
    return cli.main(
        [*args, "--config", str(run_dir / "run.cfg"), "--out", str(run_dir / out)]
    )


def test_prepare_is_deterministic(run_dir):
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert _main(run_dir, "prepare", out="again") == cli.EXIT_OK

    first = run_dir / "out" / cli.GROUNDSTATE_FILE
    second = run_dir / "again" / cli.GROUNDSTATE_FILE
    assert first.read_bytes() == second.read_bytes()

    gs = load_groundstate(first)
    assert gs.n_el == 3
    assert gs.channels[0].spectrum.converged.all()


def test_prepare_too_many_electrons(run_dir):
    (run_dir / "run.cfg").write_text(RUN.replace("n_el = 3", "n_el = 20"))
    assert _main(run_dir, "prepare") == cli.EXIT_GROUNDSTATE
    assert not (run_dir / "out" / cli.GROUNDSTATE_FILE).exists()


def test_respond_writes_reports(run_dir):
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert _main(run_dir, "respond", "--method", "direct") == cli.EXIT_OK

    gs = load_groundstate(run_dir / "out" / cli.GROUNDSTATE_FILE)
    rows = read_reports(run_dir / "out" / cli.REPORTS_FILE)
    solves = [r for r in rows if r.row == SOLVE_ROW]
    assert len(solves) == sum(s.spectrum.n_occ for s in gs.channels)
    assert [r.method for r in rows if r.row == TOTAL_ROW] == ["direct"]
    assert all(r.final_residual <= 1e-10 for r in solves)

    stored = load_response(run_dir / "out" / cli.RESPONSE_FILE)
    assert stored.metadata["method"] == "direct"
    assert stored.metadata["seed"] == 0


def test_respond_constant_perturbation(run_dir):
    (run_dir / "dv.cfg").write_text("potential = [(0, 0.3, 0.0)]\n")
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert _main(run_dir, "respond") == cli.EXIT_OK

    stored = load_response(run_dir / "out" / cli.RESPONSE_FILE)
    assert np.linalg.norm(stored.drho) < 1e-8
    assert stored.deF == pytest.approx(0.3)


def test_respond_dyson(run_dir):
    with (run_dir / "run.cfg").open("a") as f:
        f.write("kernel_scale = 0.05\ndyson_tol = 1e-8\n")
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert _main(run_dir, "respond", "--dyson", "--gauge", "abinit") == cli.EXIT_OK

    stored = load_response(run_dir / "out" / cli.RESPONSE_FILE)
    assert stored.metadata["dyson"]
    assert stored.metadata["gauge"] == "abinit"
    assert stored.metadata["kernel_scale"] == 0.05


def test_respond_unconverged_keeps_partial_reports(run_dir):
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    code = _main(run_dir, "respond", "--tol", "1e-15", "--max-iter", "2")
    assert code == cli.EXIT_RESPONSE
    assert (run_dir / "out" / cli.REPORTS_FILE).exists()
    assert not (run_dir / "out" / cli.RESPONSE_FILE).exists()


def test_respond_perturbation_outside_basis(run_dir):
    (run_dir / "dv.cfg").write_text("potential = [(9, 0.1, 0.0), (-9, 0.1, 0.0)]\n")
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert _main(run_dir, "respond") == cli.EXIT_CONFIG


def test_bench_single_gap(run_dir):
    with (run_dir / "run.cfg").open("a") as f:
        f.write("bench_gaps = [0.01]\nbench_ecut = 20\n")
    assert _main(run_dir, "bench", "--seed", "2") == cli.EXIT_OK

    rows = read_reports(run_dir / "out" / cli.BENCH_FILE)
    totals = [r for r in rows if r.row == TOTAL_ROW]
    assert sorted(r.method for r in totals) == ["direct", "schur"]
    assert all(r.gap == pytest.approx(0.01, rel=1e-2) for r in totals)


def test_bench_failed_point(run_dir):
    with (run_dir / "run.cfg").open("a") as f:
        f.write("bench_gaps = [0.01]\nbench_ecut = 2\n")
    assert _main(run_dir, "bench") == cli.EXIT_RESPONSE
    assert (run_dir / "out" / cli.BENCH_FILE).exists()


def test_adapt(run_dir):
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    code = _main(run_dir, "adapt", "--xi-target", "2.2", "--max-added", "4")
    assert code in (cli.EXIT_OK, cli.EXIT_BUDGET)
    assert (run_dir / "out" / cli.ADAPT_TRACE_FILE).exists()


@pytest.mark.parametrize(
    "text",
    [
        "n_el = 3\n",  # no model
        "model = missing.cfg\nn_el = 3\n",
        "model = model.cfg\nn_el = [\n",
        "model = model.cfg\nn_el = 3\nsmearing = lorentzian\n",
        "model = model.cfg\nn_el = 3\nseed = -1\n",
    ],
)
def test_bad_config(run_dir, text):
    (run_dir / "run.cfg").write_text(text)
    assert _main(run_dir, "prepare") == cli.EXIT_CONFIG


def test_unknown_keys_are_reported(run_dir, caplog):
    with (run_dir / "run.cfg").open("a") as f:
        f.write("temprature = 0.1\n")
    assert _main(run_dir, "prepare") == cli.EXIT_OK
    assert "temprature" in caplog.text
