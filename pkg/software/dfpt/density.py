"""
Densities in Fourier space.

A density is stored as its coefficients on the doubled mode range
m = -2 n_max..2 n_max, rho(x) = sum_m rho_m exp(i G_m x). The product of two
basis states never leaves that range, so nothing is truncated.
"""

import logging

import numpy as np
import numpy.typing as npt

from dfpt.model import LocalPotential, PlaneWaveBasis

logger = logging.getLogger(__name__)

DensityArray = npt.NDArray[np.complex128]


def density_modes(basis: PlaneWaveBasis) -> npt.NDArray[np.int64]:
    return np.arange(-2 * basis.n_max, 2 * basis.n_max + 1)


def density_size(basis: PlaneWaveBasis) -> int:
    return 4 * basis.n_max + 1


def zero_density(basis: PlaneWaveBasis) -> DensityArray:
    return np.zeros(density_size(basis), dtype=np.complex128)


def product_density(
    basis: PlaneWaveBasis, a: np.ndarray, b: np.ndarray
) -> DensityArray:
    """Fourier coefficients of conj(a(x)) * b(x)."""
    return np.correlate(np.asarray(b), np.asarray(a), mode="full") / basis.cell_length


def real_product_density(
    basis: PlaneWaveBasis, a: np.ndarray, b: np.ndarray
) -> DensityArray:
    """Fourier coefficients of 2 Re(conj(a(x)) * b(x))."""
    return product_density(basis, a, b) + product_density(basis, b, a)


def groundstate_density(
    basis: PlaneWaveBasis,
    channels: list[tuple[np.ndarray, np.ndarray, float]],
) -> DensityArray:
    """rho = sum_k weight_k sum_n f_n |phi_n|^2 over (phi, occupations, weight)."""
    rho = zero_density(basis)
    for phi, occupations, weight in channels:
        for n, f_n in enumerate(occupations):
            rho += weight * f_n * product_density(basis, phi[:, n], phi[:, n])
    return rho


def total_charge(basis: PlaneWaveBasis, rho: np.ndarray) -> float:
    return float((rho[2 * basis.n_max] * basis.cell_length).real)


def potential_inner(
    basis: PlaneWaveBasis, dV: LocalPotential, rho: np.ndarray
) -> complex:
    """<dV, rho> = integral of conj(dV(x)) rho(x) over the cell."""
    offset = 2 * basis.n_max
    total = 0j
    for mode, amplitude in dV.fourier_coeffs.items():
        if abs(mode) <= offset:
            total += np.conj(amplitude) * rho[mode + offset]
    return complex(total * basis.cell_length)


def as_potential(
    basis: PlaneWaveBasis, values: np.ndarray, atol: float = 0.0
) -> LocalPotential:
    """Read density-range coefficients back as a LocalPotential."""
    modes = density_modes(basis)
    return LocalPotential(
        {int(m): complex(v) for m, v in zip(modes, values) if abs(v) > atol}
    )


def conjugate_symmetry_defect(rho: np.ndarray) -> float:
    """max |rho_{-m} - conj(rho_m)|; zero for a real density."""
    rho = np.asarray(rho)
    return float(np.max(np.abs(rho[::-1] - np.conj(rho)), initial=0.0))


def symmetrize(rho: np.ndarray) -> DensityArray:
    """Project onto real-valued densities."""
    rho = np.asarray(rho)
    return 0.5 * (rho + np.conj(rho[::-1]))


def zero_mode(basis: PlaneWaveBasis, rho: np.ndarray) -> complex:
    return complex(rho[2 * basis.n_max])
