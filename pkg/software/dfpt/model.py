"""
Periodic plane-wave model: Fourier basis of a 1D cell, local potentials and
the Hamiltonian operator whose applications are counted.

Coefficient convention: a state is a vector of coefficients c_n on the modes
e_n(x) = exp(i G_n x) / sqrt(L), G_n = 2 pi n / L, ordered n = -n_max..n_max.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Self

import numpy as np
import numpy.typing as npt

from dfpt.utils.config import ConfigDict, load_config

logger = logging.getLogger(__name__)

ComplexArray = npt.NDArray[np.complex128]
RealArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class PlaneWaveBasis:
    cell_length: float
    ecut: float
    n_max: int

    @property
    def size(self) -> int:
        return 2 * self.n_max + 1

    @property
    def indices(self) -> npt.NDArray[np.int64]:
        return np.arange(-self.n_max, self.n_max + 1)

    @property
    def gvectors(self) -> RealArray:
        return 2 * math.pi * self.indices / self.cell_length

    @property
    def kinetic(self) -> RealArray:
        return 0.5 * self.gvectors**2

    def position(self, mode: int) -> int:
        """Position of Fourier mode `mode` in a coefficient vector."""
        if abs(mode) > self.n_max:
            raise ValueError(f"Mode {mode} outside basis range ±{self.n_max}")
        return mode + self.n_max

    def compatible_with(self, other: "PlaneWaveBasis") -> bool:
        return (
            self.n_max == other.n_max
            and self.cell_length == other.cell_length
            and self.ecut == other.ecut
        )


def build_basis(cell_length: float, ecut: float) -> PlaneWaveBasis:
    """All modes with (1/2)|G|^2 <= ecut, sorted by mode index."""
    if not cell_length > 0:
        raise ValueError(f"cell_length must be positive, got {cell_length}")
    if not ecut > 0:
        raise ValueError(f"ecut must be positive, got {ecut}")

    def _inside(n: int) -> bool:
        return 0.5 * (2 * math.pi * n / cell_length) ** 2 <= ecut

    # Float guess, then fix up at the boundary
    n_max = int(math.sqrt(2 * ecut) * cell_length / (2 * math.pi))
    while _inside(n_max + 1):
        n_max += 1
    while n_max > 0 and not _inside(n_max):
        n_max -= 1

    basis = PlaneWaveBasis(
        cell_length=float(cell_length), ecut=float(ecut), n_max=n_max
    )
    logger.debug(f"Built basis L={cell_length} ecut={ecut}: {basis.size} modes")
    return basis


def _shifted_add(out: np.ndarray, src: np.ndarray, mode: int, amplitude: complex):
    """out[i] += amplitude * src[i - mode] along axis 0 wherever both exist."""
    size = out.shape[0]
    if abs(mode) >= size:
        return
    if mode >= 0:
        out[mode:] += amplitude * src[: size - mode]
    else:
        out[: size + mode] += amplitude * src[-mode:]


@dataclass(frozen=True)
class LocalPotential:
    """Real-valued periodic potential given by its Fourier amplitudes V_m."""

    fourier_coeffs: Mapping[int, complex] = field(default_factory=dict)

    def __post_init__(self):
        coeffs = {
            int(m): complex(v)
            for m, v in self.fourier_coeffs.items()
            if complex(v) != 0
        }
        object.__setattr__(self, "fourier_coeffs", dict(sorted(coeffs.items())))

    @classmethod
    def constant(cls, value: float) -> Self:
        return cls({0: value})

    @classmethod
    def cosine(cls, amplitude: float, mode: int = 1) -> Self:
        """V(x) = 2 a cos(2 pi mode x / L), i.e. V_{±mode} = a."""
        if mode == 0:
            return cls({0: 2 * amplitude})
        return cls({mode: amplitude, -mode: amplitude})

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        n_modes: int,
        amplitude: float = 1.0,
        include_constant: bool = True,
    ) -> Self:
        """Random real potential with modes |m| <= n_modes."""
        coeffs: dict[int, complex] = {}
        if include_constant:
            coeffs[0] = amplitude * rng.standard_normal()
        for m in range(1, n_modes + 1):
            value = complex(rng.standard_normal(), rng.standard_normal())
            value *= amplitude / 2
            coeffs[m] = value
            coeffs[-m] = value.conjugate()
        return cls(coeffs)

    @property
    def max_mode(self) -> int:
        return max((abs(m) for m in self.fourier_coeffs), default=0)

    def is_conjugate_symmetric(self, tol: float = 0.0) -> bool:
        scale = max((abs(v) for v in self.fourier_coeffs.values()), default=0.0)
        for m, v in self.fourier_coeffs.items():
            partner = self.fourier_coeffs.get(-m, 0.0)
            if abs(v - complex(partner).conjugate()) > tol * max(scale, 1.0):
                return False
        return True

    def __add__(self, other: "LocalPotential") -> "LocalPotential":
        coeffs = dict(self.fourier_coeffs)
        for m, v in other.fourier_coeffs.items():
            coeffs[m] = coeffs.get(m, 0) + v
        return LocalPotential(coeffs)

    def __mul__(self, factor: float) -> "LocalPotential":
        return LocalPotential({m: factor * v for m, v in self.fourier_coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "LocalPotential":
        return self * -1.0

    def __sub__(self, other: "LocalPotential") -> "LocalPotential":
        return self + (-other)

    def apply(self, psi: np.ndarray) -> ComplexArray:
        """Multiply state(s) by V: (V psi)_n = sum_m V_m psi_{n-m} (truncated)."""
        out = np.zeros(psi.shape, dtype=np.complex128)
        for mode, amplitude in self.fourier_coeffs.items():
            _shifted_add(out, psi, mode, amplitude)
        return out

    def to_dense(self, basis: PlaneWaveBasis) -> ComplexArray:
        """Toeplitz matrix V[i, j] = V_{n_i - n_j}."""
        return self.apply(np.eye(basis.size, dtype=np.complex128))

    def as_array(self) -> npt.NDArray[np.float64]:
        """(mode, re, im) rows, sorted by mode."""
        rows = [(m, v.real, v.imag) for m, v in self.fourier_coeffs.items()]
        return np.array(rows, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_array(cls, rows: np.ndarray) -> Self:
        return cls({int(m): complex(re, im) for m, re, im in np.asarray(rows)})

    @classmethod
    def from_triples(cls, triples) -> Self:
        coeffs: dict[int, complex] = {}
        for mode, re, im in triples:
            if int(mode) != mode:
                raise ValueError(f"Potential mode {mode!r} is not an integer")
            coeffs[int(mode)] = coeffs.get(int(mode), 0) + complex(float(re), float(im))
        return cls(coeffs)

    def to_triples(self) -> list[tuple[int, float, float]]:
        return [(m, v.real, v.imag) for m, v in self.fourier_coeffs.items()]


class Operator(Protocol):
    """What the block eigensolver and the bounds need from an operator."""

    @property
    def size(self) -> int: ...

    def apply(self, v: np.ndarray) -> ComplexArray: ...

    def diagonal(self) -> RealArray: ...

    def preconditioner_diagonal(self, shift: float) -> RealArray: ...


class HamiltonianChannel:
    """
    H = -(1/2) Laplacian + V on one channel (a k-point or spin component).

    Immutable apart from `apply_count`, which counts single-vector
    applications; a block of k vectors counts k.
    """

    def __init__(
        self,
        basis: PlaneWaveBasis,
        potential: LocalPotential,
        weight: float = 1.0,
        f_max: float = 2.0,
    ):
        self.basis = basis
        self.potential = potential
        self.weight = weight
        self.f_max = f_max
        self._apply_count = 0
        self._lock = threading.Lock()
        self._kinetic = basis.kinetic

    @property
    def size(self) -> int:
        return self.basis.size

    @property
    def apply_count(self) -> int:
        return self._apply_count

    def reset_count(self, value: int = 0):
        with self._lock:
            self._apply_count = value

    def _count(self, n: int):
        with self._lock:
            self._apply_count += n

    def apply(self, v: np.ndarray) -> ComplexArray:
        v = np.asarray(v)
        if v.ndim not in (1, 2) or v.shape[0] != self.size:
            raise ValueError(
                f"State of shape {v.shape} does not match basis dimension {self.size}"
            )
        kinetic = self._kinetic if v.ndim == 1 else self._kinetic[:, None]
        result = kinetic * v + self.potential.apply(v)
        self._count(1 if v.ndim == 1 else v.shape[1])
        return result

    def diagonal(self) -> RealArray:
        return self._kinetic + self.potential.fourier_coeffs.get(0, 0).real

    def preconditioner_diagonal(self, shift: float) -> RealArray:
        if not shift > 0:
            raise ValueError(f"Preconditioner shift must be positive, got {shift}")
        return 1.0 / (self._kinetic + shift)

    def to_dense(self) -> ComplexArray:
        """Dense matrix (not counted as an application)."""
        return np.diag(self._kinetic).astype(np.complex128) + self.potential.to_dense(
            self.basis
        )

    def with_potential(self, potential: LocalPotential) -> "HamiltonianChannel":
        return build_hamiltonian(self.basis, potential, self.weight, self.f_max)

    def __repr__(self) -> str:
        return (
            f"HamiltonianChannel(size={self.size}, weight={self.weight}, "
            f"f_max={self.f_max}, apply_count={self.apply_count})"
        )


def build_hamiltonian(
    basis: PlaneWaveBasis,
    potential: LocalPotential,
    weight: float = 1.0,
    f_max: float = 2.0,
) -> HamiltonianChannel:
    if not potential.is_conjugate_symmetric(tol=1e-14):
        raise ValueError("Potential is not conjugate-symmetric (V_{-m} != conj(V_m))")
    if potential.max_mode > 2 * basis.n_max:
        raise ValueError(
            f"Potential mode {potential.max_mode} exceeds twice the basis range "
            f"({2 * basis.n_max})"
        )
    if not 0 < weight <= 1:
        raise ValueError(f"Channel weight must lie in (0, 1], got {weight}")
    if f_max not in (1, 2):
        raise ValueError(f"f_max must be 1 or 2, got {f_max}")
    return HamiltonianChannel(basis, potential, float(weight), float(f_max))


def channel_from_config(config: ConfigDict) -> HamiltonianChannel:
    basis = build_basis(
        float(config.require("cell_length")), float(config.require("ecut"))
    )
    potential = LocalPotential.from_triples(config.get("potential", []))
    return build_hamiltonian(
        basis,
        potential,
        weight=float(config.get("weight", 1.0)),
        f_max=float(config.get("f_max", 2.0)),
    )


def load_model(path: Path) -> HamiltonianChannel:
    """Read a model definition file (`key = value` lines)."""
    config = load_config(Path(path), defaults={})
    channel = channel_from_config(config)
    if unused := config.unused():
        logger.warning(f"Unused keys in model file {path}: {', '.join(unused)}")
    return channel


def load_perturbation(path: Path) -> LocalPotential:
    config = load_config(Path(path), defaults={})
    potential = LocalPotential.from_triples(config.require("potential"))
    if not potential.is_conjugate_symmetric(tol=1e-14):
        raise ValueError(f"Perturbation in {path} is not conjugate-symmetric")
    return potential
