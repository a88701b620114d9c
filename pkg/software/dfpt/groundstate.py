"""
Ground-state preparation on a fixed potential: per-channel eigensolves, one
Fermi level shared by all channels, occupations and the occupied/extra split.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import numpy.typing as npt

from dfpt import density
from dfpt.eigensolver import SpectrumSlice, block_eigensolve
from dfpt.errors import InfeasibleError
from dfpt.model import HamiltonianChannel
from dfpt.smearing import (
    ChannelLevels,
    SmearingScheme,
    charge,
    occupation,
    occupation_derivative,
    solve_fermi_level,
)
from dfpt.utils.concurrency import run_all

logger = logging.getLogger(__name__)

GUARD_BANDS = 2
DEGENERACY_TOL = 1e-10
MAX_ENLARGEMENTS = 5


@dataclass(frozen=True)
class BandPolicy:
    """How many bands to converge and how many extra bands to keep per channel."""

    n_conv: int | None = None
    n_ex: int = 3
    occupation_threshold: float = 1e-8

    def __post_init__(self):
        if self.n_conv is not None and self.n_conv < 1:
            raise ValueError(f"n_conv must be at least 1, got {self.n_conv}")
        if self.n_ex < 0:
            raise ValueError(f"n_ex must be nonnegative, got {self.n_ex}")
        if not 0 < self.occupation_threshold < 1:
            raise ValueError(
                "Occupation threshold must lie in (0, 1), "
                f"got {self.occupation_threshold}"
            )

    def converged_bands(self, n_el: float, f_max: float) -> int:
        """20% more bands than filled bands, unless fixed explicitly."""
        if self.n_conv is not None:
            return self.n_conv
        return max(1, math.ceil(1.2 * n_el / f_max))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChannelState:
    channel: HamiltonianChannel
    spectrum: SpectrumSlice
    n_conv: int


@dataclass(frozen=True)
class GroundState:
    channels: list[ChannelState]
    smearing: SmearingScheme
    fermi_level: float
    n_el: float
    band_policy: BandPolicy = field(default_factory=BandPolicy)
    eigensolver_tol: float = 1e-10
    seed: int = 0

    @property
    def basis(self):
        return self.channels[0].channel.basis

    def occupations(self, k: int) -> npt.NDArray[np.float64]:
        """Occupations of the occupied bands of channel `k`."""
        state = self.channels[k]
        return np.atleast_1d(
            occupation(
                state.spectrum.eps, self.fermi_level, self.smearing, state.channel.f_max
            )
        )

    def occupation_derivatives(self, k: int) -> npt.NDArray[np.float64]:
        state = self.channels[k]
        return np.atleast_1d(
            occupation_derivative(
                state.spectrum.eps, self.fermi_level, self.smearing, state.channel.f_max
            )
        )

    def levels(self) -> list[ChannelLevels]:
        return [
            ChannelLevels(s.spectrum.eigenvalues, s.channel.weight, s.channel.f_max)
            for s in self.channels
        ]

    def charge(self) -> float:
        """Weighted charge over every retained band at the Fermi level."""
        return charge(self.levels(), self.fermi_level, self.smearing)

    def occupied_counts(self) -> list[int]:
        return [s.spectrum.n_occ for s in self.channels]

    def rho(self) -> density.DensityArray:
        return density.groundstate_density(
            self.basis,
            [
                (s.spectrum.phi, self.occupations(k), s.channel.weight)
                for k, s in enumerate(self.channels)
            ],
        )

    def with_spectrum(self, k: int, spectrum: SpectrumSlice) -> "GroundState":
        channels = list(self.channels)
        channels[k] = replace(channels[k], spectrum=spectrum)
        return replace(self, channels=channels)


def _retain_degenerate_cluster(eigenvalues: np.ndarray, n_keep: int) -> int:
    while (
        n_keep < len(eigenvalues)
        and abs(eigenvalues[n_keep] - eigenvalues[n_keep - 1]) < DEGENERACY_TOL
    ):
        n_keep += 1
    return n_keep


def _solve_channel(
    channel: HamiltonianChannel,
    n_conv: int,
    n_ex: int,
    tol: float,
    max_iter: int,
    precond_shift: float,
    rng: np.random.Generator | None,
) -> SpectrumSlice:
    n_extra = min(n_ex + GUARD_BANDS, channel.size - n_conv)
    if n_extra < n_ex:
        raise InfeasibleError(
            f"Basis of size {channel.size} cannot hold {n_conv} + {n_ex} bands"
        )
    return block_eigensolve(
        channel,
        n_conv,
        n_extra,
        tol,
        max_iter,
        rng=rng,
        precond_shift=precond_shift,
    )


def prepare_groundstate(
    channels: Sequence[HamiltonianChannel],
    smearing: SmearingScheme,
    n_el: float,
    band_policy: BandPolicy | None = None,
    *,
    tol: float = 1e-10,
    max_iter: int = 500,
    precond_shift: float = 1.0,
    seed: int = 0,
    random_guess: bool = False,
) -> GroundState:
    """
    Eigensolve every channel, solve one Fermi level over all computed bands
    and split each channel into N occupied bands (f_n >= threshold) and the
    extra bands up to n_conv + n_ex (whole degenerate clusters retained).
    """
    if not channels:
        raise ValueError("At least one channel is required")
    basis = channels[0].basis
    if any(not c.basis.compatible_with(basis) for c in channels):
        raise ValueError("All channels must share one basis")
    policy = band_policy or BandPolicy()

    n_conv = [policy.converged_bands(n_el, c.f_max) for c in channels]
    for attempt in range(MAX_ENLARGEMENTS + 1):
        for c, n in zip(channels, n_conv):
            if n + policy.n_ex > c.size:
                raise InfeasibleError(
                    f"Band policy needs {n} + {policy.n_ex} bands, basis has {c.size}"
                )

        rngs = [
            np.random.default_rng([seed, k]) if random_guess else None
            for k in range(len(channels))
        ]
        slices = run_all(
            [
                lambda c=c, n=n, rng=rng: _solve_channel(
                    c, n, policy.n_ex, tol, max_iter, precond_shift, rng
                )
                for c, n, rng in zip(channels, n_conv, rngs)
            ]
        )

        retained = [
            s.truncated(_retain_degenerate_cluster(s.eigenvalues, n + policy.n_ex))
            for s, n in zip(slices, n_conv)
        ]
        fermi = solve_fermi_level(
            [
                ChannelLevels(s.eigenvalues, c.weight, c.f_max)
                for s, c in zip(retained, channels)
            ],
            smearing,
            n_el,
        )

        n_occ = [
            int(
                np.sum(
                    np.atleast_1d(occupation(s.eigenvalues, fermi, smearing, c.f_max))
                    >= policy.occupation_threshold
                )
            )
            for s, c in zip(retained, channels)
        ]
        short = [k for k, (N, n) in enumerate(zip(n_occ, n_conv)) if N > n]
        if not short:
            break
        if attempt == MAX_ENLARGEMENTS:
            raise InfeasibleError(
                f"Occupied band count still exceeds converged bands after "
                f"{MAX_ENLARGEMENTS} enlargements"
            )
        for k in short:
            logger.warning(
                f"Channel {k}: {n_occ[k]} bands above the occupation threshold but "
                f"only {n_conv[k]} converged, enlarging"
            )
            n_conv[k] = n_occ[k] + 1

    states = [
        ChannelState(channel=c, spectrum=s.with_occupied(N), n_conv=n)
        for c, s, N, n in zip(channels, retained, n_occ, n_conv)
    ]
    gs = GroundState(
        channels=states,
        smearing=smearing,
        fermi_level=fermi,
        n_el=float(n_el),
        band_policy=policy,
        eigensolver_tol=tol,
        seed=seed,
    )
    for k, state in enumerate(states):
        logger.info(
            f"Channel {k}: N={state.spectrum.n_occ} N_ex={state.spectrum.n_ex} "
            f"({state.spectrum.iterations} eigensolver iterations, "
            f"{state.spectrum.h_applies} applies)"
        )
    logger.info(f"Fermi level {fermi:.10f}, charge {gs.charge():.12f}")
    return gs
