"""
Sternheimer solvers for the unoccupied-space orbital response.

All three methods run the same projected preconditioned CG loop with one
Hamiltonian application per iteration:

- direct:  Q (H - eps_n) Q x = b on Ran(Q)
- schur:   the extra bands are eliminated explicitly, CG runs on Ran(R)
- shifted: (H + S - eps_n) x = rhs on the full space, S lifting the occupied
  levels so the operator is positive definite
"""

import logging
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Callable, NoReturn

import numpy as np
import numpy.typing as npt

from dfpt.errors import ConvergenceError, DegenerateShiftError, InvalidShiftError
from dfpt.gauges import GaugeMatrix
from dfpt.model import HamiltonianChannel, LocalPotential, PlaneWaveBasis

logger = logging.getLogger(__name__)

STAGNATION_WINDOW = 50
STAGNATION_FACTOR = 0.99
MIN_SCHUR_SHIFT = 1e-8
SHIFT_MARGIN = 0.1
MIN_SHIFT_GAP = 0.1

type Vector = npt.NDArray[np.complex128]


class SternheimerMethod(StrEnum):
    DIRECT = "direct"
    SCHUR = "schur"
    SHIFTED = "shifted"


@dataclass(frozen=True)
class SternheimerOptions:
    method: SternheimerMethod = SternheimerMethod.SCHUR
    tol: float = 1e-9
    max_iter: int = 1000
    preconditioner_shift: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", SternheimerMethod(self.method))
        if not self.tol > 0:
            raise ValueError(f"Sternheimer tolerance must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if not self.preconditioner_shift > 0:
            raise ValueError(
                "Preconditioner shift must be positive, "
                f"got {self.preconditioner_shift}"
            )


@dataclass(frozen=True)
class SternheimerSolution:
    dphi_q: Vector
    iterations: int
    final_residual: float
    h_applies: int
    history: list[float] = field(default_factory=list)
    method: SternheimerMethod = SternheimerMethod.DIRECT
    alpha: Vector | None = None
    dphi_r: Vector | None = None
    # Shifted solves only: max |<phi_m, x> - Gamma_mn| of the CG iterate
    # before its occupied components are replaced by Gamma
    occupied_defect: float = 0.0


def kinetic_preconditioner(
    basis: PlaneWaveBasis, shift: float
) -> npt.NDArray[np.float64]:
    """Diagonal of 1 / ((1/2)|G|^2 + shift)."""
    if not shift > 0:
        raise ValueError(f"Preconditioner shift must be positive, got {shift}")
    return 1.0 / (basis.kinetic + shift)


def _projector(basis: np.ndarray | None) -> Callable[[Vector], Vector]:
    if basis is None or basis.shape[1] == 0:
        return lambda v: v

    def project(v: Vector) -> Vector:
        return v - basis @ (basis.conj().T @ v)

    return project


@dataclass
class _CGResult:
    x: Vector
    iterations: int
    residual: float
    history: list[float]


def projected_cg(
    apply_operator: Callable[[Vector], Vector],
    rhs: Vector,
    precond: npt.NDArray[np.float64],
    project: Callable[[Vector], Vector],
    tol: float,
    max_iter: int,
    *,
    label: str = "cg",
    indefinite_error: type[Exception] = ConvergenceError,
) -> _CGResult:
    """
    Preconditioned CG for a Hermitian positive definite operator restricted to
    the range of `project`. Iterate, residual and search direction are
    re-projected every step. One operator application per iteration.
    """
    x = np.zeros_like(rhs, dtype=np.complex128)
    r = project(np.asarray(rhs, dtype=np.complex128))
    residual = float(np.linalg.norm(r))
    history = [residual]
    if residual <= tol:
        return _CGResult(x, 0, residual, history)

    best_x, best_residual = x.copy(), residual
    z = project(precond * r)
    p = z
    rz = np.vdot(r, z).real

    for iteration in range(1, max_iter + 1):
        ap = apply_operator(p)
        curvature = np.vdot(p, ap).real
        if curvature <= 0:
            raise indefinite_error(
                f"{label}: nonpositive curvature {curvature:.3e} "
                f"at iteration {iteration}"
            )
        step = rz / curvature
        x = project(x + step * p)
        r = project(r - step * ap)
        residual = float(np.linalg.norm(r))
        history.append(residual)

        if residual < best_residual:
            best_x, best_residual = x.copy(), residual
        if residual <= tol:
            logger.debug(
                f"{label}: converged in {iteration} iterations ({residual:.3e})"
            )
            return _CGResult(x, iteration, residual, history)

        if len(history) > STAGNATION_WINDOW:
            recent = min(history[-STAGNATION_WINDOW:])
            before = min(history[:-STAGNATION_WINDOW])
            if recent > STAGNATION_FACTOR * before:
                raise ConvergenceError(
                    f"{label}: residual stagnated at {recent:.3e} over the last "
                    f"{STAGNATION_WINDOW} iterations",
                    partial=_CGResult(best_x, iteration, best_residual, history),
                    history=history,
                )

        z = project(precond * r)
        rz_next = np.vdot(r, z).real
        p = project(z + (rz_next / rz) * p)
        rz = rz_next

    raise ConvergenceError(
        f"{label}: no convergence in {max_iter} iterations (residual {residual:.3e})",
        partial=_CGResult(best_x, max_iter, best_residual, history),
        history=history,
    )


def _solution_from(
    result: _CGResult, method: SternheimerMethod, **extra
) -> SternheimerSolution:
    return SternheimerSolution(
        dphi_q=result.x,
        iterations=result.iterations,
        final_residual=result.residual,
        h_applies=result.iterations,
        history=result.history,
        method=method,
        **extra,
    )


def _reraise_with_solution(e: ConvergenceError, method: SternheimerMethod) -> NoReturn:
    partial = e.partial
    if isinstance(partial, _CGResult):
        e.partial = _solution_from(partial, method)
    raise e


def sternheimer_rhs(phi: np.ndarray, dv_phi_n: np.ndarray) -> Vector:
    """b_n = -Q dV phi_n."""
    return -_projector(phi)(np.asarray(dv_phi_n, dtype=np.complex128))


def solve_direct(
    channel: HamiltonianChannel,
    eps_n: float,
    phi: np.ndarray,
    b_n: np.ndarray,
    opts: SternheimerOptions,
) -> SternheimerSolution:
    project = _projector(phi)

    def apply_operator(v: Vector) -> Vector:
        return project(channel.apply(v) - eps_n * v)

    try:
        result = projected_cg(
            apply_operator,
            b_n,
            kinetic_preconditioner(channel.basis, opts.preconditioner_shift),
            project,
            opts.tol,
            opts.max_iter,
            label="direct",
        )
    except ConvergenceError as e:
        _reraise_with_solution(e, SternheimerMethod.DIRECT)
    return _solution_from(result, SternheimerMethod.DIRECT)


def extra_band_images(channel: HamiltonianChannel, phi_ex: np.ndarray) -> Vector:
    """H applied to the extra bands, computed once per channel."""
    if phi_ex.shape[1] == 0:
        return np.zeros_like(phi_ex)
    return channel.apply(phi_ex)


def solve_schur(
    channel: HamiltonianChannel,
    eps_n: float,
    phi: np.ndarray,
    phi_ex: np.ndarray,
    eps_ex: np.ndarray,
    b_n: np.ndarray,
    opts: SternheimerOptions,
    h_phi_ex: np.ndarray | None = None,
) -> SternheimerSolution:
    """
    Split dphi^Q = phi_ex alpha + y with y in Ran(R), R the projector off all
    computed bands. y solves the Schur complement system

        R (H - eps_n) y - Y diag(1/s) Y^* y = R b - Y (phi_ex^* b) / s,

    with Y = R H phi_ex and s = eps_ex - eps_n; then
    alpha = (phi_ex^* b - Y^* y) / s.
    """
    if phi_ex.shape[1] == 0:
        return solve_direct(channel, eps_n, phi, b_n, opts)

    shifts = np.asarray(eps_ex, dtype=float) - eps_n
    if np.min(np.abs(shifts)) < MIN_SCHUR_SHIFT:
        raise DegenerateShiftError(
            f"Extra band within {np.min(np.abs(shifts)):.2e} of eps_n={eps_n}"
        )
    if h_phi_ex is None:
        h_phi_ex = extra_band_images(channel, phi_ex)

    project = _projector(np.hstack([phi, phi_ex]))
    y_block = project(h_phi_ex)
    b_n = np.asarray(b_n, dtype=np.complex128)
    b_ex = phi_ex.conj().T @ b_n

    def apply_operator(v: Vector) -> Vector:
        coupling = y_block @ ((y_block.conj().T @ v) / shifts)
        return project(channel.apply(v) - eps_n * v) - coupling

    rhs = project(b_n) - y_block @ (b_ex / shifts)
    try:
        result = projected_cg(
            apply_operator,
            rhs,
            kinetic_preconditioner(channel.basis, opts.preconditioner_shift),
            project,
            opts.tol,
            opts.max_iter,
            label="schur",
        )
    except ConvergenceError as e:
        _reraise_with_solution(e, SternheimerMethod.SCHUR)

    dphi_r = result.x
    alpha = (b_ex - y_block.conj().T @ dphi_r) / shifts
    return replace(
        _solution_from(result, SternheimerMethod.SCHUR, alpha=alpha, dphi_r=dphi_r),
        dphi_q=phi_ex @ alpha + dphi_r,
    )


def occupied_shifts(eps: np.ndarray, eps_next: float | None) -> npt.NDArray[np.float64]:
    """s_m = eps_N + gap - eps_m + margin, gap = max(eps_{N+1} - eps_N, 0.1)."""
    eps = np.asarray(eps, dtype=float)
    eps_top = float(eps[-1])
    gap = MIN_SHIFT_GAP if eps_next is None else max(eps_next - eps_top, MIN_SHIFT_GAP)
    return eps_top + gap - eps + SHIFT_MARGIN


def solve_shifted(
    channel: HamiltonianChannel,
    band: int,
    phi: np.ndarray,
    eps: np.ndarray,
    gauge: GaugeMatrix,
    f_n: float,
    dV: LocalPotential,
    opts: SternheimerOptions,
    *,
    eps_next: float | None = None,
    shifts: np.ndarray | None = None,
) -> SternheimerSolution:
    """
    Solve (H + S - eps_n) x = -(f_n Q dV phi_n - sum_m G_mn (eps_m + s_m - eps_n) phi_m)
    on the full space, S = sum_m s_m phi_m phi_m^*. The solution is
    x = w_n + f_n dphi_n^Q: its occupied components are Gamma_mn.
    """
    eps = np.asarray(eps, dtype=float)
    eps_n = float(eps[band])
    if shifts is None:
        shifts = occupied_shifts(eps, eps_next)
    lifted = eps + shifts - eps_n
    if np.any(lifted <= 0):
        raise InvalidShiftError(
            f"Shifted operator indefinite for band {band}: "
            f"min lifted level {lifted.min():.3e}"
        )

    gamma_column = gauge.gamma[:, band]
    rhs = sternheimer_rhs(phi, f_n * dV.apply(phi[:, band]))
    rhs = rhs + phi @ (gamma_column * lifted)

    def apply_operator(v: Vector) -> Vector:
        return channel.apply(v) + phi @ (shifts * (phi.conj().T @ v)) - eps_n * v

    try:
        result = projected_cg(
            apply_operator,
            rhs,
            kinetic_preconditioner(channel.basis, opts.preconditioner_shift),
            lambda v: v,
            opts.tol,
            opts.max_iter,
            label="shifted",
            indefinite_error=InvalidShiftError,
        )
    except ConvergenceError as e:
        _reraise_with_solution(e, SternheimerMethod.SHIFTED)

    # The occupied components are known exactly
    defect = float(
        np.max(np.abs(phi.conj().T @ result.x - gamma_column), initial=0.0)
    )
    logger.debug(f"Shifted band {band}: occupied defect {defect:.3e}")
    x = _projector(phi)(result.x) + phi @ gamma_column
    return replace(
        _solution_from(result, SternheimerMethod.SHIFTED),
        dphi_q=x,
        occupied_defect=defect,
    )
