import numpy as np
import pytest
import scipy.linalg

from dfpt import density
from dfpt.errors import InfeasibleError
from dfpt.groundstate import BandPolicy, prepare_groundstate
from dfpt.model import LocalPotential, build_hamiltonian
from dfpt.oracle import FullSpectrum, groundstate_density_exact
from dfpt.smearing import SmearingKind, SmearingScheme

from ..cases import basis_with_modes, random_case


def test_band_policy_defaults():
    policy = BandPolicy()
    assert policy.converged_bands(10, 2.0) == 6
    assert policy.converged_bands(3, 1.0) == 4
    assert BandPolicy(n_conv=9).converged_bands(10, 2.0) == 9
    with pytest.raises(ValueError):
        BandPolicy(n_ex=-1)
    with pytest.raises(ValueError):
        BandPolicy(occupation_threshold=0.0)


def test_groundstate_matches_dense_diagonalisation(metal, metal_gs):
    channel = metal.channels[0]
    exact = scipy.linalg.eigvalsh(channel.to_dense())
    spectrum = metal_gs.channels[0].spectrum

    n_conv = metal_gs.channels[0].n_conv
    assert np.allclose(spectrum.eigenvalues[:n_conv], exact[:n_conv], atol=1e-10)
    assert metal_gs.charge() == pytest.approx(metal.n_el, abs=1e-10)
    assert spectrum.n_ex >= metal.band_policy.n_ex
    # Occupied bands are exactly those above the threshold
    occ = metal_gs.occupations(0)
    assert np.all(occ >= metal.band_policy.occupation_threshold)


def test_groundstate_density_matches_oracle(metal, metal_gs):
    spectra = [FullSpectrum.of(c) for c in metal.channels]
    rho_exact, fermi = groundstate_density_exact(spectra, metal.smearing, metal.n_el)
    assert metal_gs.fermi_level == pytest.approx(fermi, abs=1e-8)
    assert np.allclose(metal_gs.rho(), rho_exact, atol=1e-7)
    assert density.total_charge(metal_gs.basis, metal_gs.rho()) == pytest.approx(
        metal.n_el, abs=1e-7
    )


def test_shared_fermi_level_across_channels(two_channel):
    gs = two_channel.prepare()
    assert len(gs.channels) == 2
    assert gs.charge() == pytest.approx(two_channel.n_el, abs=1e-10)
    assert sum(gs.occupied_counts()) >= 2


def test_degenerate_cluster_is_kept_whole():
    # Free particles: every level above zero is doubly degenerate
    basis = basis_with_modes(8)
    channel = build_hamiltonian(basis, LocalPotential())
    gs = prepare_groundstate(
        [channel],
        SmearingScheme(SmearingKind.FERMI_DIRAC, 1e-2),
        2.0,
        BandPolicy(n_conv=1, n_ex=1),
    )
    eps = gs.channels[0].spectrum.eigenvalues
    # Two requested bands end inside the first pair, which is kept whole
    assert len(eps) == 3
    assert eps[1] == pytest.approx(eps[2], abs=1e-10)


def test_band_count_is_enlarged(caplog):
    case = random_case(3, temperature=0.1, n_el=2.0)
    gs = prepare_groundstate(
        case.channels,
        case.smearing,
        case.n_el,
        BandPolicy(n_conv=1, n_ex=2),
        tol=1e-10,
    )
    spectrum = gs.channels[0].spectrum
    assert gs.channels[0].n_conv >= spectrum.n_occ > 1
    assert spectrum.converged[: gs.channels[0].n_conv].all()
    assert "enlarging" in caplog.text


def test_infeasible_electron_count():
    case = random_case(5, n_max=3)
    with pytest.raises(InfeasibleError):
        prepare_groundstate(
            case.channels, case.smearing, 100.0, BandPolicy(n_conv=3, n_ex=1)
        )
