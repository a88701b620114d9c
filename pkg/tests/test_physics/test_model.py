import math

import numpy as np
import pytest

from dfpt.model import LocalPotential, build_basis, build_hamiltonian, load_model

from ..cases import basis_with_modes


def test_build_basis_counts_modes():
    basis = build_basis(2 * math.pi, 8.0)
    # 0.5 n^2 <= 8 -> |n| <= 4
    assert basis.n_max == 4
    assert basis.size == 9
    assert list(basis.indices) == list(range(-4, 5))
    assert np.allclose(basis.kinetic, 0.5 * basis.indices**2)


def test_build_basis_rejects_nonpositive():
    with pytest.raises(ValueError):
        build_basis(0.0, 1.0)
    with pytest.raises(ValueError):
        build_basis(1.0, -1.0)


def test_potential_drops_zeros_and_sorts():
    v = LocalPotential({2: 1.0, -2: 1.0, 0: 0.0, 1: 0.5j, -1: -0.5j})
    assert list(v.fourier_coeffs) == [-2, -1, 1, 2]
    assert v.max_mode == 2
    assert v.is_conjugate_symmetric()


def test_potential_algebra():
    a = LocalPotential.cosine(0.3, 2)
    b = LocalPotential.constant(1.0)
    combined = 2 * a + b - b
    assert combined.fourier_coeffs == {-2: 0.6, 2: 0.6}
    assert (-a).fourier_coeffs[2] == -0.3


def test_potential_dense_matches_apply(rng):
    basis = basis_with_modes(6)
    v = LocalPotential.random(rng, 3)
    psi = rng.standard_normal(basis.size) + 1j * rng.standard_normal(basis.size)
    assert np.allclose(v.to_dense(basis) @ psi, v.apply(psi))
    dense = v.to_dense(basis)
    assert np.allclose(dense, dense.conj().T)


def test_potential_triples_roundtrip():
    v = LocalPotential.from_triples([(1, 0.5, 0.25), (-1, 0.5, -0.25), (0, 1.0, 0.0)])
    assert LocalPotential.from_triples(v.to_triples()) == v
    assert LocalPotential.from_array(v.as_array()) == v


def test_hamiltonian_counts_columns(rng):
    basis = basis_with_modes(5)
    channel = build_hamiltonian(basis, LocalPotential.cosine(0.2, 1))
    channel.apply(np.ones(basis.size))
    channel.apply(np.ones((basis.size, 4)))
    assert channel.apply_count == 5
    channel.reset_count()
    assert channel.apply_count == 0


def test_hamiltonian_is_hermitian(rng):
    basis = basis_with_modes(8)
    channel = build_hamiltonian(basis, LocalPotential.random(rng, 4))
    dense = channel.to_dense()
    assert np.allclose(dense, dense.conj().T)
    assert np.allclose(np.diag(dense).real, channel.diagonal())
    # Materialising the matrix is not counted
    assert channel.apply_count == 0


def test_hamiltonian_validation():
    basis = basis_with_modes(3)
    with pytest.raises(ValueError):
        build_hamiltonian(basis, LocalPotential({1: 1.0, -1: 2.0}))
    with pytest.raises(ValueError):
        build_hamiltonian(basis, LocalPotential.cosine(1.0, 7))
    with pytest.raises(ValueError):
        build_hamiltonian(basis, LocalPotential(), weight=0.0)
    with pytest.raises(ValueError):
        build_hamiltonian(basis, LocalPotential(), f_max=3.0)
    with pytest.raises(ValueError):
        build_hamiltonian(basis, LocalPotential()).apply(np.ones(basis.size + 1))


def test_load_model(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text(
        "cell_length = 6.283185307179586\n"
        "ecut = 8.0\n"
        "potential = [(1, 0.25, 0.0), (-1, 0.25, 0.0)]\n"
        "weight = 0.5\n"
    )
    channel = load_model(path)
    assert channel.basis.n_max == 4
    assert channel.weight == 0.5
    assert channel.f_max == 2.0
    assert channel.potential.fourier_coeffs == {-1: 0.25, 1: 0.25}


def test_apply_benchmark(benchmark, rng):
    basis = basis_with_modes(100)
    channel = build_hamiltonian(basis, LocalPotential.random(rng, 5))
    block = rng.standard_normal((basis.size, 8)) + 0j
    result = benchmark(channel.apply, block)
    assert result.shape == block.shape
