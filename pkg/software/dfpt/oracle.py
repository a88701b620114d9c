"""
Brute-force references: full diagonalization, the sum-over-states response
and a finite-difference response. Nothing is truncated, so these are the
exact discrete quantities every solver is checked against.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt
import scipy.linalg

from dfpt import density
from dfpt.model import HamiltonianChannel, LocalPotential, PlaneWaveBasis
from dfpt.smearing import (
    SmearingScheme,
    exact_fermi_level,
    occupation,
    occupation_derivative,
)

logger = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-8


class DenseOperator:
    """A Hermitian matrix behind the operator interface, with an apply counter."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.complex128)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"Expected a square matrix, got shape {matrix.shape}")
        self.matrix = matrix
        self.apply_count = 0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> npt.NDArray[np.complex128]:
        v = np.asarray(v)
        if v.shape[0] != self.size:
            raise ValueError(
                f"State of shape {v.shape} does not match size {self.size}"
            )
        self.apply_count += 1 if v.ndim == 1 else v.shape[1]
        return self.matrix @ v

    def diagonal(self) -> npt.NDArray[np.float64]:
        return np.diag(self.matrix).real.copy()

    def preconditioner_diagonal(self, shift: float) -> npt.NDArray[np.float64]:
        if not shift > 0:
            raise ValueError(f"Preconditioner shift must be positive, got {shift}")
        return np.ones(self.size)

    def to_dense(self) -> npt.NDArray[np.complex128]:
        return self.matrix.copy()


def random_hermitian(
    rng: np.random.Generator, size: int, scale: float = 1.0
) -> np.ndarray:
    a = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    return scale * 0.5 * (a + a.conj().T)


@dataclass(frozen=True)
class FullSpectrum:
    """All eigenpairs of a dense channel Hamiltonian, ascending."""

    eigenvalues: npt.NDArray[np.float64]
    vectors: npt.NDArray[np.complex128]
    basis: PlaneWaveBasis
    weight: float
    f_max: float

    @classmethod
    def of(cls, channel: HamiltonianChannel) -> "FullSpectrum":
        values, vectors = scipy.linalg.eigh(channel.to_dense())
        return cls(values, vectors, channel.basis, channel.weight, channel.f_max)

    @property
    def size(self) -> int:
        return len(self.eigenvalues)

    def potential_matrix(
        self, dV: LocalPotential, n_bands: int | None = None
    ) -> np.ndarray:
        """dV_mn = <phi_m, dV phi_n> over the lowest `n_bands` bands."""
        phi = self.vectors[:, :n_bands]
        return phi.conj().T @ dV.apply(phi)


def degeneracy_tolerance(eps: np.ndarray) -> float:
    eps = np.asarray(eps)
    spread = float(np.ptp(eps)) if eps.size else 0.0
    return DEGENERACY_RTOL * max(1.0, spread)


def divided_difference(
    eps: np.ndarray,
    fermi: float,
    smearing: SmearingScheme,
    f_max: float,
    dtol: float | None = None,
) -> npt.NDArray[np.float64]:
    """
    Q_nm = (f_n - f_m) / (eps_n - eps_m), with the derivative at the pair mean
    for |eps_n - eps_m| < dtol (the diagonal included).
    """
    eps = np.asarray(eps, dtype=float)
    if dtol is None:
        dtol = degeneracy_tolerance(eps)
    occ = np.asarray(occupation(eps, fermi, smearing, f_max))
    gaps = eps[:, None] - eps[None, :]
    degenerate = np.abs(gaps) < dtol
    safe_gaps = np.where(degenerate, 1.0, gaps)
    quotient = (occ[:, None] - occ[None, :]) / safe_gaps
    midpoints = 0.5 * (eps[:, None] + eps[None, :])
    limits = np.asarray(occupation_derivative(midpoints, fermi, smearing, f_max))
    return np.where(degenerate, limits, quotient)


def _delta_fermi(
    spectra: Sequence[FullSpectrum],
    diagonals: Sequence[np.ndarray],
    fermi: float,
    smearing: SmearingScheme,
) -> float:
    numerator = denominator = 0.0
    for spectrum, dv_diag in zip(spectra, diagonals):
        eps = spectrum.eigenvalues[: len(dv_diag)]
        fprime = np.asarray(occupation_derivative(eps, fermi, smearing, spectrum.f_max))
        numerator += spectrum.weight * float(np.sum(fprime * dv_diag.real))
        denominator += spectrum.weight * float(np.sum(fprime))
    if abs(denominator) < 1e-12 * sum(len(d) for d in diagonals):
        return 0.0
    return numerator / denominator


def chi0_sum_over_states(
    spectra: Sequence[FullSpectrum],
    fermi: float,
    smearing: SmearingScheme,
    dV: LocalPotential,
    *,
    n_bands: Sequence[int] | None = None,
    delta_fermi: float | None = None,
) -> density.DensityArray:
    """
    drho = sum_k w_k sum_{n,m} Q_nm (dV_mn - deF delta_mn) conj(phi_n) phi_m.

    `n_bands` restricts the double sum to the lowest bands of each channel
    (used to isolate the occupied block); `delta_fermi` overrides the Fermi
    level shift, which otherwise comes from charge conservation over the
    same bands.
    """
    if not spectra:
        raise ValueError("At least one spectrum is required")
    basis = spectra[0].basis
    counts = [s.size for s in spectra] if n_bands is None else list(n_bands)

    matrices = [s.potential_matrix(dV, n) for s, n in zip(spectra, counts)]
    if delta_fermi is None:
        delta_fermi = _delta_fermi(
            spectra, [np.diag(m) for m in matrices], fermi, smearing
        )

    drho = density.zero_density(basis)
    for spectrum, dv, n in zip(spectra, matrices, counts):
        eps = spectrum.eigenvalues[:n]
        phi = spectrum.vectors[:, :n]
        quotient = divided_difference(
            eps,
            fermi,
            smearing,
            spectrum.f_max,
            degeneracy_tolerance(spectrum.eigenvalues),
        )
        amplitudes = quotient.T * (dv - delta_fermi * np.eye(n))
        induced = phi @ amplitudes
        for band in range(n):
            drho += spectrum.weight * density.product_density(
                basis, phi[:, band], induced[:, band]
            )
    return drho


def groundstate_density_exact(
    spectra: Sequence[FullSpectrum], smearing: SmearingScheme, n_el: float
) -> tuple[density.DensityArray, float]:
    fermi = exact_fermi_level(
        [(s.eigenvalues, s.weight, s.f_max) for s in spectra], smearing, n_el
    )
    channels = [
        (
            s.vectors,
            np.asarray(occupation(s.eigenvalues, fermi, smearing, s.f_max)),
            s.weight,
        )
        for s in spectra
    ]
    return density.groundstate_density(spectra[0].basis, channels), fermi


def finite_difference_chi0(
    channels: Sequence[HamiltonianChannel],
    smearing: SmearingScheme,
    n_el: float,
    dV: LocalPotential,
    h: float = 1e-5,
    richardson: bool = False,
) -> density.DensityArray:
    """
    Central difference D(h) = (rho(V + h dV) - rho(V - h dV)) / 2h, re-solving
    all channels. With `richardson`, returns (4 D(h/2) - D(h)) / 3, which
    cancels the h^2 term; needed at low temperature, where the occupations
    vary on the scale T and D(h) alone is only accurate to (h |dV| / T)^2.
    """
    if not h > 0:
        raise ValueError(f"Step must be positive, got {h}")

    def _density(step: float) -> density.DensityArray:
        displaced = [
            FullSpectrum.of(channel.with_potential(channel.potential + step * dV))
            for channel in channels
        ]
        rho, _ = groundstate_density_exact(displaced, smearing, n_el)
        return rho

    def _central(step: float) -> density.DensityArray:
        return (_density(step) - _density(-step)) / (2 * step)

    if not richardson:
        return _central(h)
    return (4 * _central(h / 2) - _central(h)) / 3


def delta_matrix(
    eps: np.ndarray,
    occ: np.ndarray,
    occ_deriv: np.ndarray,
    dV_matrix: np.ndarray,
    dtol: float | None = None,
) -> npt.NDArray[np.complex128]:
    """
    Delta_mn = (f_n - f_m)/(eps_n - eps_m) dV_mn over the occupied bands.
    Near-degenerate pairs use the mean of the two derivatives; the diagonal
    is zero (it is carried by df_n instead).
    """
    eps = np.asarray(eps, dtype=float)
    occ = np.asarray(occ, dtype=float)
    occ_deriv = np.asarray(occ_deriv, dtype=float)
    dV_matrix = np.asarray(dV_matrix, dtype=np.complex128)
    if dtol is None:
        dtol = degeneracy_tolerance(eps)

    gaps = eps[None, :] - eps[:, None]  # [m, n] -> eps_n - eps_m
    degenerate = np.abs(gaps) < dtol
    safe_gaps = np.where(degenerate, 1.0, gaps)
    quotient = np.where(
        degenerate,
        0.5 * (occ_deriv[None, :] + occ_deriv[:, None]),
        (occ[None, :] - occ[:, None]) / safe_gaps,
    )
    delta = quotient * dV_matrix
    np.fill_diagonal(delta, 0.0)
    return delta
