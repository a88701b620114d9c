import math

import pytest

from dfpt.bench import (
    RATIO_SCHEMA,
    bench_groundstate,
    broadband_perturbation,
    default_perturbation,
    gap_sweep,
    iteration_ratio,
    lattice_model,
    split_pair_model,
    threshold_offset,
    xi_scatter,
)
from dfpt.oracle import FullSpectrum, chi0_sum_over_states, groundstate_density_exact
from dfpt.reports import SOLVE_ROW, TOTAL_ROW, SolverReport
from dfpt.response import apply_chi0
from dfpt.smearing import SmearingKind, SmearingScheme, occupation
from dfpt.sternheimer import SternheimerOptions

from ..cases import relative_error

SMALL_GAP = 1e-3
LAST_BAND = 3


@pytest.fixture(scope="module")
def small_gap_gs():
    return split_pair_model(SMALL_GAP).prepare()


@pytest.fixture(scope="module")
def small_gap_sweep():
    return gap_sweep([SMALL_GAP])


@pytest.mark.parametrize("kind", list(SmearingKind))
def test_threshold_offset(kind):
    smearing = SmearingScheme(kind, 1e-2)
    offset = threshold_offset(smearing, 1e-8, 2.0)
    f = occupation(smearing.temperature * offset, 0.0, smearing, 2.0)
    assert f == pytest.approx(1e-8, rel=1e-6)


def test_split_pair_model_layout(small_gap_gs):
    spectrum = small_gap_gs.channels[0].spectrum
    assert spectrum.n_occ == 4
    assert spectrum.n_ex == 3
    gap = spectrum.eps_ex[0] - spectrum.eps[-1]
    assert gap == pytest.approx(SMALL_GAP, rel=1e-2)
    assert spectrum.eps_ex[-1] - spectrum.eps[-1] >= 0.5
    assert spectrum.converged.all()


def test_split_pair_model_validation():
    with pytest.raises(ValueError):
        split_pair_model(0.0)
    with pytest.raises(ValueError):
        split_pair_model(4.0)
    with pytest.raises(ValueError):
        split_pair_model(1e-2, pair_mode=0)
    with pytest.raises(ValueError):
        split_pair_model(1e-2, ecut=2.0)


def test_schur_beats_direct_on_small_gap(small_gap_sweep):
    assert not small_gap_sweep.failures
    (direct,) = small_gap_sweep.solves("direct", LAST_BAND)
    (schur,) = small_gap_sweep.solves("schur", LAST_BAND)
    assert schur.iterations <= 0.6 * direct.iterations

    totals = {
        r.method: r for r in small_gap_sweep.reports if r.row == TOTAL_ROW
    }
    assert totals["schur"].h_applies < totals["direct"].h_applies
    assert totals["schur"].gap == pytest.approx(SMALL_GAP, rel=1e-2)


def test_sweep_frame(small_gap_sweep):
    frame = small_gap_sweep.frame()
    assert frame.filter(frame["row"] == TOTAL_ROW).height == 2
    assert frame.filter(frame["row"] == SOLVE_ROW).height == 8


def test_shifted_is_slower_but_correct(small_gap_gs):
    dV = default_perturbation(0, 4)
    schur = apply_chi0(small_gap_gs, dV, stern_opts=SternheimerOptions(method="schur"))
    shifted = apply_chi0(
        small_gap_gs, dV, stern_opts=SternheimerOptions(method="shifted")
    )
    assert shifted.reports[LAST_BAND].iterations >= schur.reports[LAST_BAND].iterations

    spectra = [FullSpectrum.of(s.channel) for s in small_gap_gs.channels]
    _, fermi = groundstate_density_exact(
        spectra, small_gap_gs.smearing, small_gap_gs.n_el
    )
    expected = chi0_sum_over_states(spectra, fermi, small_gap_gs.smearing, dV)
    assert relative_error(shifted.drho, expected) < 1e-6


@pytest.mark.slow
def test_gap_sweep_conditioning(record):
    sweep = gap_sweep()
    assert not sweep.failures

    direct = [r.iterations for r in sweep.solves("direct", LAST_BAND)]
    schur = [r.iterations for r in sweep.solves("schur", LAST_BAND)]
    record("direct", direct)
    record("schur", schur)

    assert len(direct) == len(schur) == 4
    assert all(a <= b for a, b in zip(direct, direct[1:]))
    assert direct[-1] > direct[0]
    assert all(abs(s - schur[0]) <= 0.2 * schur[0] for s in schur)
    assert schur[-1] <= 0.6 * direct[-1]


def test_broadband_perturbation(small_gap_gs):
    basis = small_gap_gs.basis
    dV = broadband_perturbation(basis, 3)
    assert dV.max_mode == 2 * basis.n_max
    assert 0 not in dV.fourier_coeffs
    assert dV.is_conjugate_symmetric()
    assert dV.fourier_coeffs == broadband_perturbation(basis, 3).fourier_coeffs


def test_failed_sweep_point_is_tabled():
    sweep = gap_sweep([1e-2], ecut=2.0)
    assert len(sweep.failures) == 2
    assert all(isinstance(e, ValueError) for e in sweep.failures)
    assert sweep.reports == []


def test_bench_groundstate(small_gap_gs):
    dV = broadband_perturbation(small_gap_gs.basis, 0)
    result, ratios = bench_groundstate(small_gap_gs, dV)
    assert ratios.schema == RATIO_SCHEMA
    assert ratios["method"].to_list() == ["direct", "schur"]
    assert ratios["n_occ"].to_list() == [4, 4]
    # Direct is dominated by the small gap of the last band
    direct_ratio, schur_ratio = ratios["iteration_ratio"].to_list()
    assert direct_ratio > schur_ratio
    assert not result.failures


def _report(band, iterations, method="schur"):
    return SolverReport(
        channel=0,
        band=band,
        method=method,
        gauge="min",
        gap=math.nan,
        iterations=iterations,
        final_residual=1e-10,
        h_applies=iterations,
    )


def test_iteration_ratio():
    reports = [_report(1, 30), _report(0, 10), _report(0, 99, method="direct")]
    assert iteration_ratio(reports, 0, "schur") == pytest.approx(3.0)
    assert iteration_ratio([_report(0, 0), _report(1, 0)], 0, "schur") == 1.0
    assert iteration_ratio([_report(0, 0), _report(1, 4)], 0, "schur") == math.inf
    with pytest.raises(ValueError):
        iteration_ratio(reports, 1, "schur")


@pytest.mark.parametrize("n_occ", [2, 5])
def test_lattice_model_layout(n_occ):
    model = lattice_model(4, n_occ)
    spectrum = model.prepare(seed=4).channels[0].spectrum
    assert spectrum.n_occ == n_occ
    assert spectrum.n_ex == 3
    assert spectrum.converged.all()

    again = lattice_model(4, n_occ)
    assert again.n_el == model.n_el
    coeffs = model.channel.potential.fourier_coeffs
    assert again.channel.potential.fourier_coeffs == coeffs


def test_lattice_model_validation():
    with pytest.raises(ValueError):
        lattice_model(0, 0)
    with pytest.raises(ValueError):
        lattice_model(0, 3, ecut=2.0)


def test_xi_scatter_rows():
    scatter = xi_scatter([1, 2], n_occ=(2, 3))
    assert scatter["seed"].to_list() == [1, 2]
    assert scatter["n_occ"].to_list() == [2, 3]
    assert scatter["method"].to_list() == ["schur", "schur"]
    assert (scatter["xi"] > 1).all()
    assert (scatter["iteration_ratio"] > 0).all()
