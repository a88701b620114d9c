"""Seeded model problems shared by the test modules."""

import math
from dataclasses import dataclass

import numpy as np

from dfpt.groundstate import BandPolicy, GroundState, prepare_groundstate
from dfpt.model import (
    HamiltonianChannel,
    LocalPotential,
    build_basis,
    build_hamiltonian,
)
from dfpt.smearing import SmearingKind, SmearingScheme


@dataclass
class ModelCase:
    channels: list[HamiltonianChannel]
    smearing: SmearingScheme
    n_el: float
    band_policy: BandPolicy

    def prepare(self, **kwargs) -> GroundState:
        kwargs.setdefault("tol", 1e-11)
        return prepare_groundstate(
            self.channels, self.smearing, self.n_el, self.band_policy, **kwargs
        )


def basis_with_modes(n_max: int, cell_length: float = 2 * math.pi):
    # ecut between the n_max and n_max + 1 shells
    scale = 2 * math.pi / cell_length
    return build_basis(cell_length, 0.5 * scale**2 * (n_max**2 + n_max + 0.5))


def random_case(
    seed: int,
    *,
    n_max: int = 16,
    n_channels: int = 1,
    temperature: float = 1e-2,
    n_el: float = 3.0,
    n_modes: int = 3,
    amplitude: float = 0.5,
    kind: SmearingKind = SmearingKind.FERMI_DIRAC,
    n_ex: int = 3,
) -> ModelCase:
    """Seeded random model with L = 2 pi, so mode n has kinetic energy n^2 / 2."""
    rng = np.random.default_rng(seed)
    basis = basis_with_modes(n_max)
    weights = rng.uniform(0.5, 1.0, n_channels)
    weights = weights / weights.sum()
    channels = [
        build_hamiltonian(
            basis,
            LocalPotential.random(rng, n_modes, amplitude),
            weight=float(w),
            f_max=2.0,
        )
        for w in weights
    ]
    return ModelCase(
        channels=channels,
        smearing=SmearingScheme(kind, temperature),
        n_el=n_el,
        band_policy=BandPolicy(n_ex=n_ex),
    )


def random_perturbation(seed: int, n_modes: int = 3, amplitude: float = 0.1):
    return LocalPotential.random(
        np.random.default_rng(seed + 1000), n_modes, amplitude, include_constant=False
    )


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    scale = float(np.linalg.norm(expected))
    return float(np.linalg.norm(np.asarray(actual) - expected)) / max(scale, 1e-300)
