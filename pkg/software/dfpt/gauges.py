"""
Occupied-occupied response coefficients.

For occupied bands m, n the response enters only through
Gamma_mn = <phi_m, f_n dphi_n>, and any choice with Gamma_nn = 0 and
Gamma_mn + conj(Gamma_nm) = Delta_mn yields the same density response.
The kinds below are the usual ways of splitting Delta_mn between the pair.
"""

import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy import special

from dfpt import density
from dfpt.model import PlaneWaveBasis
from dfpt.oracle import degeneracy_tolerance
from dfpt.smearing import SmearingScheme

logger = logging.getLogger(__name__)

INSULATING_RTOL = 1e-12


class GaugeKind(StrEnum):
    ORTHOGONAL = "orth"
    SIMPLE = "simple"
    QUANTUM_ESPRESSO = "qe"
    ABINIT = "abinit"
    MINIMAL = "min"


@dataclass(frozen=True)
class GaugeMatrix:
    delta: npt.NDArray[np.complex128]
    gamma: npt.NDArray[np.complex128]
    kind: GaugeKind
    degenerate_fallback: bool = False

    def constraint_defect(self) -> float:
        """max |Gamma_mn + conj(Gamma_nm) - Delta_mn| over off-diagonal pairs."""
        defect = self.gamma + self.gamma.conj().T - self.delta
        np.fill_diagonal(defect, 0.0)
        return float(np.max(np.abs(defect), initial=0.0))

    def max_coefficient(self) -> float:
        return float(np.max(np.abs(self.gamma), initial=0.0))


@dataclass(frozen=True)
class OccupiedVariation:
    w: npt.NDArray[np.complex128]
    df: npt.NDArray[np.float64]
    deF: float


def _split_weights(
    kind: GaugeKind,
    eps: np.ndarray,
    occ: np.ndarray,
    smearing: SmearingScheme,
) -> np.ndarray:
    """Fraction of Delta_mn assigned to Gamma_mn, indexed [m, n]."""
    f_m, f_n = occ[:, None], occ[None, :]
    match kind:
        case GaugeKind.SIMPLE:
            return np.full((len(occ), len(occ)), 0.5)
        case GaugeKind.QUANTUM_ESPRESSO:
            return special.expit(-(eps[None, :] - eps[:, None]) / smearing.temperature)
        case GaugeKind.ABINIT:
            return np.where(f_n > f_m, 1.0, np.where(f_n < f_m, 0.0, 0.5))
        case GaugeKind.MINIMAL:
            return f_n**2 / (f_n**2 + f_m**2)
    raise ValueError(f"No split weights for gauge kind {kind}")


def build_gamma(
    delta: np.ndarray,
    eps: np.ndarray,
    occ: np.ndarray,
    dV_matrix: np.ndarray,
    smearing: SmearingScheme,
    kind: GaugeKind | str,
    dtol: float | None = None,
) -> GaugeMatrix:
    kind = GaugeKind(kind)
    eps = np.asarray(eps, dtype=float)
    occ = np.asarray(occ, dtype=float)
    delta = np.asarray(delta, dtype=np.complex128)
    if len(eps) < 1:
        raise ValueError("At least one occupied band is required")

    fallback = False
    if kind is GaugeKind.ORTHOGONAL:
        if dtol is None:
            dtol = degeneracy_tolerance(eps)
        gaps = eps[None, :] - eps[:, None]  # eps_n - eps_m
        degenerate = np.abs(gaps) < dtol
        np.fill_diagonal(degenerate, False)
        safe_gaps = np.where(np.abs(gaps) < dtol, 1.0, gaps)
        gamma = occ[None, :] * np.asarray(dV_matrix, dtype=np.complex128) / safe_gaps
        if degenerate.any():
            fallback = True
            gamma = np.where(degenerate, 0.5 * delta, gamma)
            logger.warning(
                f"Orthogonal gauge: {int(degenerate.sum()) // 2} degenerate occupied "
                f"pair(s) fall back to the simple gauge"
            )
    else:
        gamma = _split_weights(kind, eps, occ, smearing) * delta

    gamma = np.array(gamma, dtype=np.complex128)
    np.fill_diagonal(gamma, 0.0)
    return GaugeMatrix(
        delta=delta, gamma=gamma, kind=kind, degenerate_fallback=fallback
    )


def delta_fermi_level(
    d_eps: Sequence[np.ndarray],
    occ_derivs: Sequence[np.ndarray],
    weights: Sequence[float],
) -> float:
    """
    Fermi level shift from charge conservation,
    (sum w sum f'_n d_eps_n) / (sum w sum f'_n); 0 in the insulating limit.
    """
    numerator_terms: list[float] = []
    denominator_terms: list[float] = []
    count = 0
    for de, fp, weight in zip(d_eps, occ_derivs, weights):
        de, fp = np.asarray(de, dtype=float), np.asarray(fp, dtype=float)
        numerator_terms.extend((weight * fp * de).tolist())
        denominator_terms.extend((weight * fp).tolist())
        count += len(fp)

    denominator = math.fsum(denominator_terms)
    if abs(denominator) < INSULATING_RTOL * max(count, 1):
        return 0.0
    return math.fsum(numerator_terms) / denominator


def occupied_variation(
    gauge: GaugeMatrix,
    phi: np.ndarray,
    d_eps: np.ndarray,
    occ_derivs: np.ndarray,
    deF: float,
) -> OccupiedVariation:
    """w_n = sum_{m != n} Gamma_mn phi_m and df_n = f'_n (d_eps_n - deF)."""
    w = np.asarray(phi) @ gauge.gamma
    df = np.asarray(occ_derivs, dtype=float) * (np.asarray(d_eps, dtype=float) - deF)
    return OccupiedVariation(w=w, df=df, deF=deF)


def occupied_block_density(
    basis: PlaneWaveBasis,
    phi: np.ndarray,
    variation: OccupiedVariation,
    weight: float = 1.0,
) -> density.DensityArray:
    """sum_n 2 Re(conj(phi_n) w_n) + df_n |phi_n|^2, times the channel weight."""
    drho = density.zero_density(basis)
    for n in range(phi.shape[1]):
        drho += density.real_product_density(basis, phi[:, n], variation.w[:, n])
        drho += variation.df[n] * density.product_density(basis, phi[:, n], phi[:, n])
    return weight * drho
