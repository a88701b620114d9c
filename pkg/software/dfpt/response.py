"""
Density response: the chi0 application assembled from the occupied block
(gauge coefficients) and the Sternheimer solutions, and the damped Dyson
iteration for the Hartree-interacting response.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np
import numpy.typing as npt

from dfpt import density
from dfpt.errors import ConvergenceError
from dfpt.gauges import (
    GaugeKind,
    GaugeMatrix,
    OccupiedVariation,
    build_gamma,
    delta_fermi_level,
    occupied_variation,
)
from dfpt.groundstate import GroundState
from dfpt.model import LocalPotential, PlaneWaveBasis
from dfpt.oracle import delta_matrix
from dfpt.reports import SolverReport, totals
from dfpt.sternheimer import (
    SternheimerMethod,
    SternheimerOptions,
    SternheimerSolution,
    extra_band_images,
    occupied_shifts,
    solve_direct,
    solve_schur,
    solve_shifted,
    sternheimer_rhs,
)
from dfpt.trace import Trace
from dfpt.utils.concurrency import gather_threads, run_all

logger = logging.getLogger(__name__)

DEFAULT_MIXING = 0.5


@dataclass(frozen=True)
class ChannelResponse:
    gauge: GaugeMatrix
    variation: OccupiedVariation
    solutions: list[SternheimerSolution]
    extra_band_applies: int = 0

    @property
    def w(self) -> npt.NDArray[np.complex128]:
        return self.variation.w

    @property
    def df(self) -> npt.NDArray[np.float64]:
        return self.variation.df

    @property
    def dphi_q(self) -> npt.NDArray[np.complex128]:
        if not self.solutions:
            return np.zeros((self.w.shape[0], 0), dtype=np.complex128)
        return np.column_stack([s.dphi_q for s in self.solutions])


@dataclass(frozen=True)
class ResponseResult:
    drho: density.DensityArray
    deF: float
    channels: list[ChannelResponse]
    reports: list[SolverReport]
    total_h_applies: int
    method: SternheimerMethod
    gauge: GaugeKind
    metadata: dict[str, Any] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    def totals(self) -> list[SolverReport]:
        extra = sum(c.extra_band_applies for c in self.channels)
        return totals(self.reports, {str(self.method): extra})

    def traces(self) -> list[Trace]:
        return [
            Trace.from_history(f"ch{r.channel}-n{r.band}", s.history)
            for c, r_list in zip(self.channels, self._reports_by_channel())
            for r, s in zip(r_list, c.solutions)
        ]

    def _reports_by_channel(self) -> list[list[SolverReport]]:
        grouped: list[list[SolverReport]] = [[] for _ in self.channels]
        for r in self.reports:
            grouped[r.channel].append(r)
        return grouped

    def norm(self) -> float:
        return float(np.linalg.norm(self.drho))


class HartreeKernel:
    """Fourier multiplier scale * 4 pi / |G|^2 on densities, 0 at G = 0."""

    def __init__(self, basis: PlaneWaveBasis, scale: float = 1.0):
        self.basis = basis
        self.scale = scale
        g = 2 * math.pi * density.density_modes(basis) / basis.cell_length
        safe_g = np.where(g == 0, 1.0, g)
        multipliers = np.where(g == 0, 0.0, 4 * math.pi / safe_g**2)
        self.multipliers = scale * multipliers

    def scaled(self, scale: float) -> "HartreeKernel":
        return HartreeKernel(self.basis, self.scale * scale)

    def apply(self, rho: np.ndarray) -> density.DensityArray:
        return self.multipliers * np.asarray(rho)

    def potential(self, rho: np.ndarray) -> LocalPotential:
        return density.as_potential(self.basis, self.apply(density.symmetrize(rho)))


@dataclass(frozen=True)
class _ChannelSetup:
    k: int
    phi: np.ndarray
    eps: np.ndarray
    occ: np.ndarray
    dv_phi: np.ndarray
    gauge: GaugeMatrix
    variation: OccupiedVariation
    h_phi_ex: np.ndarray | None


def _empty_setup(
    k: int, phi: np.ndarray, dv_phi: np.ndarray, gauge_kind: GaugeKind, deF: float
) -> _ChannelSetup:
    # A channel lying wholly above the Fermi level has nothing to solve and
    # contributes no density response
    empty = np.zeros((0, 0), dtype=np.complex128)
    gauge = GaugeMatrix(delta=empty, gamma=empty.copy(), kind=gauge_kind)
    variation = OccupiedVariation(
        w=np.zeros((phi.shape[0], 0), dtype=np.complex128),
        df=np.zeros(0),
        deF=deF,
    )
    return _ChannelSetup(
        k, phi, np.zeros(0), np.zeros(0), dv_phi, gauge, variation, None
    )


def _prepare_channels(
    gs: GroundState, dV: LocalPotential, gauge_kind: GaugeKind, opts: SternheimerOptions
) -> tuple[list[_ChannelSetup], float]:
    blocks = []
    for k, state in enumerate(gs.channels):
        phi = state.spectrum.phi
        dv_phi = dV.apply(phi)
        blocks.append((phi, dv_phi, phi.conj().T @ dv_phi))

    deF = delta_fermi_level(
        [np.diag(m).real for _, _, m in blocks],
        [gs.occupation_derivatives(k) for k in range(len(gs.channels))],
        [s.channel.weight for s in gs.channels],
    )

    setups = []
    for k, (state, (phi, dv_phi, dv_matrix)) in enumerate(zip(gs.channels, blocks)):
        if phi.shape[1] == 0:
            setups.append(_empty_setup(k, phi, dv_phi, gauge_kind, deF))
            continue
        eps = state.spectrum.eps
        occ = gs.occupations(k)
        occ_deriv = gs.occupation_derivatives(k)
        delta = delta_matrix(eps, occ, occ_deriv, dv_matrix)
        gauge = build_gamma(delta, eps, occ, dv_matrix, gs.smearing, gauge_kind)
        variation = occupied_variation(
            gauge, phi, np.diag(dv_matrix).real, occ_deriv, deF
        )
        h_phi_ex = None
        if opts.method is SternheimerMethod.SCHUR:
            h_phi_ex = extra_band_images(state.channel, state.spectrum.phi_ex)
        setups.append(
            _ChannelSetup(k, phi, eps, occ, dv_phi, gauge, variation, h_phi_ex)
        )
    return setups, deF


def _band_job(
    gs: GroundState,
    setup: _ChannelSetup,
    n: int,
    dV: LocalPotential,
    opts: SternheimerOptions,
) -> Callable[[], SternheimerSolution]:
    state = gs.channels[setup.k]
    spectrum = state.spectrum
    eps_n = float(setup.eps[n])

    def job() -> SternheimerSolution:
        match opts.method:
            case SternheimerMethod.DIRECT:
                b_n = sternheimer_rhs(setup.phi, setup.dv_phi[:, n])
                return solve_direct(state.channel, eps_n, setup.phi, b_n, opts)
            case SternheimerMethod.SCHUR:
                b_n = sternheimer_rhs(setup.phi, setup.dv_phi[:, n])
                return solve_schur(
                    state.channel,
                    eps_n,
                    setup.phi,
                    spectrum.phi_ex,
                    spectrum.eps_ex,
                    b_n,
                    opts,
                    h_phi_ex=setup.h_phi_ex,
                )
            case SternheimerMethod.SHIFTED:
                eps_next = float(spectrum.eps_ex[0]) if spectrum.n_ex else None
                return solve_shifted(
                    state.channel,
                    n,
                    setup.phi,
                    setup.eps,
                    setup.gauge,
                    float(setup.occ[n]),
                    dV,
                    opts,
                    shifts=occupied_shifts(setup.eps, eps_next),
                )

    return job


def _band_gap(gs: GroundState, k: int) -> float:
    spectrum = gs.channels[k].spectrum
    if spectrum.n_ex == 0 or spectrum.n_occ == 0:
        return math.nan
    return float(spectrum.eps_ex[0] - spectrum.eps[-1])


def _assemble(
    gs: GroundState,
    gauge_kind: GaugeKind,
    opts: SternheimerOptions,
    setups: list[_ChannelSetup],
    deF: float,
    outcomes: list,
) -> ResponseResult:
    basis = gs.basis
    reports: list[SolverReport] = []
    channels: list[ChannelResponse] = []
    failures = []
    drho = density.zero_density(basis)
    cursor = 0

    for setup in setups:
        state = gs.channels[setup.k]
        n_occ = setup.phi.shape[1]
        solutions = outcomes[cursor : cursor + n_occ]
        cursor += n_occ
        gap = _band_gap(gs, setup.k)

        for n, solution in enumerate(solutions):
            if isinstance(solution, BaseException):
                failures.append(solution)
                partial = getattr(solution, "partial", None)
                if isinstance(partial, SternheimerSolution):
                    reports.append(_report(setup.k, n, opts, gauge_kind, gap, partial))
                continue
            reports.append(_report(setup.k, n, opts, gauge_kind, gap, solution))

        if failures:
            continue

        channel_rho = density.zero_density(basis)
        for n, solution in enumerate(solutions):
            phi_n = setup.phi[:, n]
            if opts.method is SternheimerMethod.SHIFTED:
                u_n = solution.dphi_q
            else:
                u_n = setup.variation.w[:, n] + setup.occ[n] * solution.dphi_q
            channel_rho += density.real_product_density(basis, phi_n, u_n)
            channel_rho += setup.variation.df[n] * density.product_density(
                basis, phi_n, phi_n
            )
        drho += state.channel.weight * channel_rho

        extra = 0 if setup.h_phi_ex is None else setup.h_phi_ex.shape[1]
        channels.append(
            ChannelResponse(setup.gauge, setup.variation, list(solutions), extra)
        )

    if failures:
        first = failures[0]
        if isinstance(first, ConvergenceError):
            first.reports = reports
        logger.error(f"{len(failures)} Sternheimer solve(s) failed")
        raise first

    total = sum(r.h_applies for r in reports)
    total += sum(c.extra_band_applies for c in channels)
    result = ResponseResult(
        drho=drho,
        deF=deF,
        channels=channels,
        reports=reports,
        total_h_applies=total,
        method=opts.method,
        gauge=gauge_kind,
        metadata={
            "method": str(opts.method),
            "gauge": str(gauge_kind),
            "tol": opts.tol,
            "max_iter": opts.max_iter,
            "precond_shift": opts.preconditioner_shift,
            "gauge_fallback": any(c.gauge.degenerate_fallback for c in channels),
        },
    )
    logger.info(
        f"chi0 ({opts.method}, {gauge_kind}): |drho|={result.norm():.6e} "
        f"deF={deF:.6e} H applies={total}"
    )
    return result


def _report(
    k: int,
    n: int,
    opts: SternheimerOptions,
    gauge_kind: GaugeKind,
    gap: float,
    solution: SternheimerSolution,
) -> SolverReport:
    return SolverReport(
        channel=k,
        band=n,
        method=str(opts.method),
        gauge=str(gauge_kind),
        gap=gap,
        iterations=solution.iterations,
        final_residual=solution.final_residual,
        h_applies=solution.h_applies,
    )


def _jobs(gs, dV, gauge_kind, opts):
    setups, deF = _prepare_channels(gs, dV, gauge_kind, opts)
    jobs = [
        _band_job(gs, setup, n, dV, opts)
        for setup in setups
        for n in range(setup.phi.shape[1])
    ]
    return setups, deF, jobs


def apply_chi0(
    gs: GroundState,
    dV: LocalPotential,
    gauge_kind: GaugeKind | str = GaugeKind.MINIMAL,
    stern_opts: SternheimerOptions | None = None,
) -> ResponseResult:
    """
    drho = sum_k w_k sum_n [2 Re(conj(phi_n) (w_n + f_n dphi_n^Q)) + df_n |phi_n|^2].

    Band solves run concurrently; the assembly runs in fixed channel and band
    order so the result does not depend on scheduling.
    """
    gauge_kind = GaugeKind(gauge_kind)
    opts = stern_opts or SternheimerOptions()
    setups, deF, jobs = _jobs(gs, dV, gauge_kind, opts)
    outcomes = run_all(jobs, return_exceptions=True)
    return _assemble(gs, gauge_kind, opts, setups, deF, outcomes)


async def apply_chi0_async(
    gs: GroundState,
    dV: LocalPotential,
    gauge_kind: GaugeKind | str = GaugeKind.MINIMAL,
    stern_opts: SternheimerOptions | None = None,
) -> ResponseResult:
    gauge_kind = GaugeKind(gauge_kind)
    opts = stern_opts or SternheimerOptions()
    setups, deF, jobs = _jobs(gs, dV, gauge_kind, opts)
    outcomes = await gather_threads(jobs)
    return _assemble(gs, gauge_kind, opts, setups, deF, outcomes)


def solve_dyson(
    gs: GroundState,
    dV0: LocalPotential,
    kernel: HartreeKernel,
    mixing: float = DEFAULT_MIXING,
    tol: float = 1e-8,
    max_iter: int = 100,
    stern_opts: SternheimerOptions | None = None,
    gauge_kind: GaugeKind | str = GaugeKind.MINIMAL,
) -> ResponseResult:
    """
    Damped fixed-point iteration for drho = chi0 (dV0 + K drho), started from
    chi0 dV0. Stops when |drho - chi0(dV0 + K drho)| <= tol |chi0 dV0|.
    chi0 is linear, so each step applies it to K drho only.
    """
    if not 0 < mixing <= 1:
        raise ValueError(f"Mixing must lie in (0, 1], got {mixing}")
    if not tol > 0:
        raise ValueError(f"Dyson tolerance must be positive, got {tol}")

    base = apply_chi0(gs, dV0, gauge_kind, stern_opts)
    reference = base.norm()
    drho = base.drho
    cost = base.total_h_applies
    reports = list(base.reports)
    history: list[float] = []

    def _result(rho: np.ndarray, converged: bool) -> ResponseResult:
        return replace(
            base,
            drho=rho,
            reports=reports,
            total_h_applies=cost,
            history=list(history),
            metadata=base.metadata
            | {
                "dyson": True,
                "mixing": mixing,
                "dyson_tol": tol,
                "dyson_iterations": len(history),
                "dyson_converged": converged,
                "kernel": "hartree",
                "kernel_scale": kernel.scale,
            },
        )

    for iteration in range(max_iter):
        induced = apply_chi0(gs, kernel.potential(drho), gauge_kind, stern_opts)
        cost += induced.total_h_applies
        reports.extend(induced.reports)
        fixed_point = base.drho + induced.drho

        residual = float(np.linalg.norm(drho - fixed_point))
        history.append(residual)
        logger.debug(f"Dyson iteration {iteration}: residual {residual:.3e}")
        if residual <= tol * reference:
            logger.info(f"Dyson converged after {iteration + 1} chi0 applications")
            return _result(drho, converged=True)

        drho = (1 - mixing) * drho + mixing * fixed_point

    raise ConvergenceError(
        f"Dyson iteration did not converge in {max_iter} steps "
        f"(residual {history[-1]:.3e}, target {tol * reference:.3e})",
        partial=_result(drho, converged=False),
        history=history,
        reports=reports,
    )
