"""Smeared occupations and the Fermi level."""

import logging
import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy import optimize, special

from dfpt.errors import InfeasibleError

logger = logging.getLogger(__name__)

FERMI_BRACKET_WIDTH = 20 * math.log(10)
FERMI_MAX_ITER = 200
FERMI_BRACKET_EXPANSIONS = 16

type FloatLike = float | npt.NDArray[np.float64]


class SmearingKind(StrEnum):
    FERMI_DIRAC = "fermi-dirac"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SmearingScheme:
    kind: SmearingKind
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, "kind", SmearingKind(self.kind))
        if not self.temperature > 0:
            raise ValueError(
                f"Smearing temperature must be positive, got {self.temperature}"
            )

    def shape(self, x: FloatLike) -> FloatLike:
        """Occupation shape f(x) / f_max on the reduced variable x."""
        match self.kind:
            case SmearingKind.FERMI_DIRAC:
                return special.expit(-np.asarray(x, dtype=float))
            case SmearingKind.GAUSSIAN:
                return 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2))

    def shape_derivative(self, x: FloatLike) -> FloatLike:
        x = np.asarray(x, dtype=float)
        match self.kind:
            case SmearingKind.FERMI_DIRAC:
                return -special.expit(x) * special.expit(-x)
            case SmearingKind.GAUSSIAN:
                return -0.5 * math.sqrt(2 / math.pi) * np.exp(-0.5 * x**2)

    def reduced(self, eps: FloatLike, fermi: float) -> FloatLike:
        return (np.asarray(eps, dtype=float) - fermi) / self.temperature


def _scalar_or_array(value):
    value = np.asarray(value)
    return float(value) if value.ndim == 0 else value


def occupation(
    eps: FloatLike, fermi: float, smearing: SmearingScheme, f_max: float
) -> FloatLike:
    return _scalar_or_array(f_max * smearing.shape(smearing.reduced(eps, fermi)))


def occupation_derivative(
    eps: FloatLike, fermi: float, smearing: SmearingScheme, f_max: float
) -> FloatLike:
    """(1/T) f'((eps - fermi)/T); the n = m limit of (f_n - f_m)/(eps_n - eps_m)."""
    x = smearing.reduced(eps, fermi)
    return _scalar_or_array(f_max * smearing.shape_derivative(x) / smearing.temperature)


@dataclass(frozen=True)
class ChannelLevels:
    eps: Sequence[float]
    weight: float
    f_max: float


def charge(
    channels: Sequence[ChannelLevels | tuple], fermi: float, smearing: SmearingScheme
) -> float:
    """Total weighted charge sum_k w_k sum_n f_n at a trial Fermi level."""
    total = 0.0
    for levels in channels:
        eps, weight, f_max = _unpack(levels)
        total += weight * math.fsum(
            np.atleast_1d(occupation(np.asarray(eps), fermi, smearing, f_max))
        )
    return total


def _unpack(levels: ChannelLevels | tuple) -> tuple[np.ndarray, float, float]:
    if isinstance(levels, ChannelLevels):
        return np.asarray(levels.eps, dtype=float), levels.weight, levels.f_max
    eps, weight, f_max = levels
    return np.asarray(eps, dtype=float), float(weight), float(f_max)


def capacity(channels: Sequence[ChannelLevels | tuple]) -> float:
    total = 0.0
    for levels in channels:
        eps, weight, f_max = _unpack(levels)
        total += weight * f_max * len(eps)
    return total


def solve_fermi_level(
    channels: Sequence[ChannelLevels | tuple],
    smearing: SmearingScheme,
    n_el: float,
) -> float:
    """
    Fermi level matching the electron count, by bisection on the decreasing
    charge residual over [min eps - 20 T ln 10, max eps + 20 T ln 10]. An
    electron count closer to 0 or to the capacity than that bracket resolves
    widens it, doubling the step each time.
    """
    if not channels:
        raise ValueError("At least one channel is required")

    all_eps = np.concatenate([_unpack(levels)[0] for levels in channels])
    if all_eps.size == 0:
        raise ValueError("Channels carry no levels")

    cap = capacity(channels)
    if not 0 < n_el < cap:
        raise InfeasibleError(
            f"Electron count {n_el} outside the feasible range (0, {cap})"
        )

    width = FERMI_BRACKET_WIDTH * smearing.temperature
    lower, upper = float(all_eps.min()) - width, float(all_eps.max()) + width

    def residual(fermi: float) -> float:
        return charge(channels, fermi, smearing) - n_el

    step = width
    for _ in range(FERMI_BRACKET_EXPANSIONS):
        widen_down, widen_up = residual(lower) > 0, residual(upper) < 0
        if not (widen_down or widen_up):
            break
        lower -= step if widen_down else 0.0
        upper += step if widen_up else 0.0
        step *= 2

    if residual(lower) > 0 or residual(upper) < 0:
        raise InfeasibleError(
            f"Cannot bracket the Fermi level for n_el={n_el} within [{lower}, {upper}]"
        )

    fermi, result = optimize.bisect(
        residual,
        lower,
        upper,
        xtol=1e-15 * max(1.0, abs(lower), abs(upper)),
        rtol=4 * np.finfo(float).eps,
        maxiter=FERMI_MAX_ITER,
        full_output=True,
        disp=False,
    )
    logger.debug(
        f"Fermi level {fermi:.15g} after {result.iterations} bisection steps "
        f"(charge error {residual(fermi):.3e})"
    )
    return float(fermi)


def exact_fermi_level(
    full_spectra: Sequence[tuple[np.ndarray, float, float]],
    smearing: SmearingScheme,
    n_el: float,
) -> float:
    """Fermi level over complete spectra (every eigenvalue of every channel)."""
    return solve_fermi_level(
        [
            ChannelLevels(np.asarray(eps), weight, f_max)
            for eps, weight, f_max in full_spectra
        ],
        smearing,
        n_el,
    )
