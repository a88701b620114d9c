"""
Method comparisons: per-band Sternheimer iteration counts on a family of
models with a controlled gap above the occupied bands, and on existing
ground states.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import polars as pl
from scipy import special

from dfpt.adaptive import spectrum_xi
from dfpt.errors import ConvergenceError
from dfpt.gauges import GaugeKind
from dfpt.groundstate import BandPolicy, GroundState, prepare_groundstate
from dfpt.model import (
    HamiltonianChannel,
    LocalPotential,
    PlaneWaveBasis,
    build_basis,
    build_hamiltonian,
)
from dfpt.oracle import FullSpectrum
from dfpt.reports import SOLVE_ROW, SolverReport, to_frame
from dfpt.response import apply_chi0
from dfpt.smearing import ChannelLevels, SmearingKind, SmearingScheme, charge
from dfpt.sternheimer import SternheimerMethod, SternheimerOptions
from dfpt.utils.exception_table import ExceptionTable

logger = logging.getLogger(__name__)

DEFAULT_GAPS = (1.0, 1e-1, 1e-2, 1e-3)
# 41 plane waves on the default cell
BENCH_ECUT = 200.0
# Weak enough that the absolute CG tolerance leaves only a few iterations
# to bulk convergence, so the small-gap outlier shows in the counts
WEAK_AMPLITUDE = 1e-6
RATIO_AMPLITUDE = 0.1
DEFAULT_METHODS = (SternheimerMethod.DIRECT, SternheimerMethod.SCHUR)

RATIO_SCHEMA = pl.Schema(
    {
        "channel": pl.Int64,
        "method": pl.String,
        "n_occ": pl.Int64,
        "n_ex": pl.Int64,
        "iteration_ratio": pl.Float64,
        "xi": pl.Float64,
    }
)


@dataclass(frozen=True)
class BenchModel:
    """One channel with n_el placing the occupation threshold inside a gap."""

    channel: HamiltonianChannel
    smearing: SmearingScheme
    n_el: float
    band_policy: BandPolicy

    def prepare(
        self, *, tol: float = 1e-10, max_iter: int = 500, seed: int = 0
    ) -> GroundState:
        return prepare_groundstate(
            [self.channel],
            self.smearing,
            self.n_el,
            self.band_policy,
            tol=tol,
            max_iter=max_iter,
            seed=seed,
        )


@dataclass(frozen=True)
class SplitPairModel(BenchModel):
    """
    One channel whose only potential mode 2p splits the free pair e_{±p}.

    The lower member is the last occupied band, the upper one the first
    extra band; n_el places the occupation threshold halfway between them.
    """

    target_gap: float
    pair_mode: int

    @property
    def n_occ(self) -> int:
        return 2 * self.pair_mode


@dataclass(frozen=True)
class LatticeModel(BenchModel):
    """A deep random lattice potential with the lowest n_occ bands occupied."""

    n_occ: int
    seed: int


def threshold_offset(smearing: SmearingScheme, threshold: float, f_max: float) -> float:
    """Reduced energy x with f(x) = threshold."""
    p = threshold / f_max
    match smearing.kind:
        case SmearingKind.FERMI_DIRAC:
            return float(-special.logit(p))
        case SmearingKind.GAUSSIAN:
            return float(math.sqrt(2) * special.erfcinv(2 * p))


def _filling(
    eigenvalues: np.ndarray,
    n_occ: int,
    smearing: SmearingScheme,
    occupation_threshold: float,
    f_max: float,
) -> float:
    # Electron count whose threshold crossing sits halfway between bands
    # n_occ and n_occ + 1
    midpoint = 0.5 * (eigenvalues[n_occ - 1] + eigenvalues[n_occ])
    fermi = midpoint - smearing.temperature * threshold_offset(
        smearing, occupation_threshold, f_max
    )
    return charge([ChannelLevels(eigenvalues, 1.0, f_max)], fermi, smearing)


def split_pair_model(
    gap: float,
    *,
    pair_mode: int = 2,
    cell_length: float = 2 * math.pi,
    ecut: float = BENCH_ECUT,
    smearing: SmearingScheme | None = None,
    f_max: float = 2.0,
    n_ex: int = 3,
    occupation_threshold: float = 1e-8,
) -> SplitPairModel:
    if not gap > 0:
        raise ValueError(f"Gap must be positive, got {gap}")
    if pair_mode < 1:
        raise ValueError(f"pair_mode must be at least 1, got {pair_mode}")
    smearing = smearing or SmearingScheme(SmearingKind.FERMI_DIRAC, 1e-2)

    basis = build_basis(cell_length, ecut)
    if basis.n_max < pair_mode + 2:
        raise ValueError(
            f"Basis range ±{basis.n_max} too small for pair mode {pair_mode}"
        )
    kinetic = 0.5 * (2 * math.pi / cell_length) ** 2
    spacing = kinetic * min(2 * pair_mode - 1, 2 * pair_mode + 1)
    if gap / 2 >= spacing:
        raise ValueError(
            f"Gap {gap} would reorder the pair with its neighbours (spacing {spacing})"
        )

    channel = build_hamiltonian(
        basis, LocalPotential.cosine(gap / 2, 2 * pair_mode), weight=1.0, f_max=f_max
    )
    eigenvalues = FullSpectrum.of(channel).eigenvalues
    n_occ = 2 * pair_mode
    n_el = _filling(eigenvalues, n_occ, smearing, occupation_threshold, f_max)

    logger.debug(
        f"Split pair model: gap={gap:g} measured="
        f"{eigenvalues[n_occ] - eigenvalues[n_occ - 1]:.6e} n_el={n_el:.12f}"
    )
    return SplitPairModel(
        channel=channel,
        smearing=smearing,
        n_el=n_el,
        band_policy=BandPolicy(
            n_conv=n_occ + n_ex, n_ex=0, occupation_threshold=occupation_threshold
        ),
        target_gap=gap,
        pair_mode=pair_mode,
    )


def default_perturbation(
    seed: int, n_modes: int, amplitude: float = 0.1
) -> LocalPotential:
    """Seeded random perturbation without a constant part."""
    return LocalPotential.random(
        np.random.default_rng(seed), n_modes, amplitude, include_constant=False
    )


def broadband_perturbation(
    basis: PlaneWaveBasis, seed: int, amplitude: float = WEAK_AMPLITUDE
) -> LocalPotential:
    """Seeded perturbation coupling every pair of plane waves in the basis."""
    return default_perturbation(seed, 2 * basis.n_max, amplitude)


def lattice_model(
    seed: int,
    n_occ: int,
    *,
    depth: float = 4.0,
    n_modes: int = 3,
    ecut: float = BENCH_ECUT,
    smearing: SmearingScheme | None = None,
    f_max: float = 2.0,
    n_ex: int = 3,
    occupation_threshold: float = 1e-8,
) -> LatticeModel:
    """
    Seeded real lattice potential with modes up to n_modes and coefficients of
    order depth, on the 2 pi cell. The potential is deep enough that CG
    counts follow the conditioning of each band.
    """
    if n_occ < 1:
        raise ValueError(f"n_occ must be at least 1, got {n_occ}")
    smearing = smearing or SmearingScheme(SmearingKind.FERMI_DIRAC, 1e-2)
    basis = build_basis(2 * math.pi, ecut)
    if basis.size < n_occ + n_ex + 1:
        raise ValueError(
            f"Basis of {basis.size} plane waves too small for {n_occ} + {n_ex} bands"
        )

    potential = LocalPotential.random(
        np.random.default_rng([seed, n_modes]), n_modes, depth
    )
    channel = build_hamiltonian(basis, potential, weight=1.0, f_max=f_max)
    eigenvalues = FullSpectrum.of(channel).eigenvalues
    gap = float(eigenvalues[n_occ] - eigenvalues[n_occ - 1])
    if gap <= 0:
        raise ValueError(f"Bands {n_occ} and {n_occ + 1} are degenerate")
    n_el = _filling(eigenvalues, n_occ, smearing, occupation_threshold, f_max)

    logger.debug(f"Lattice model {seed}: N={n_occ} gap={gap:.6e} n_el={n_el:.12f}")
    return LatticeModel(
        channel=channel,
        smearing=smearing,
        n_el=n_el,
        band_policy=BandPolicy(
            n_conv=n_occ + n_ex, n_ex=0, occupation_threshold=occupation_threshold
        ),
        n_occ=n_occ,
        seed=seed,
    )


@dataclass
class BenchResult:
    reports: list[SolverReport] = field(default_factory=list)
    failures: list[Exception] = field(default_factory=list)
    table: ExceptionTable | None = None

    def frame(self) -> pl.DataFrame:
        return to_frame(self.reports)

    def solves(self, method: str, band: int | None = None) -> list[SolverReport]:
        return [
            r
            for r in self.reports
            if r.row == SOLVE_ROW
            and r.method == method
            and (band is None or r.band == band)
        ]


def _run_methods(
    gs: GroundState,
    dV: LocalPotential,
    methods: Sequence[SternheimerMethod],
    opts: SternheimerOptions,
    gauge: GaugeKind,
    table: ExceptionTable,
    row_name: str,
    gap: float | None,
) -> list[SolverReport]:
    reports: list[SolverReport] = []
    for cm, method in table.iter_row(row_name, methods):
        with cm as cell:
            try:
                result = apply_chi0(gs, dV, gauge, replace(opts, method=method))
            except ConvergenceError as e:
                reports.extend(e.reports)
                raise
            reports.extend(result.reports)
            for total in result.totals():
                if gap is not None:
                    total = replace(total, gap=gap)
                reports.append(total)
                cell.value = total.iterations
    return reports


def gap_sweep(
    gaps: Sequence[float] = DEFAULT_GAPS,
    methods: Sequence[SternheimerMethod | str] = DEFAULT_METHODS,
    *,
    dV: LocalPotential | None = None,
    stern_opts: SternheimerOptions | None = None,
    gauge: GaugeKind | str = GaugeKind.MINIMAL,
    pair_mode: int = 2,
    cell_length: float = 2 * math.pi,
    ecut: float = BENCH_ECUT,
    smearing: SmearingScheme | None = None,
    eigensolver_tol: float = 1e-10,
    seed: int = 0,
) -> BenchResult:
    """
    For each gap, prepare a split pair model and record per-band iteration
    counts and totals for every method. A failing point is recorded in the
    table and the sweep continues. Without dV, a weak broadband
    perturbation is used so that every band is excited.
    """
    if not gaps:
        raise ValueError("Gap sweep needs at least one gap")
    methods = [SternheimerMethod(m) for m in methods]
    gauge = GaugeKind(gauge)
    opts = stern_opts or SternheimerOptions()
    if dV is None:
        dV = broadband_perturbation(build_basis(cell_length, ecut), seed)

    table = ExceptionTable(headers=[str(m) for m in methods])
    result = BenchResult(table=table)
    for gap in gaps:
        name = f"gap={gap:g}"
        try:
            model = split_pair_model(
                gap,
                pair_mode=pair_mode,
                cell_length=cell_length,
                ecut=ecut,
                smearing=smearing,
            )
            gs = model.prepare(tol=eigensolver_tol, seed=seed)
        except Exception as e:
            logger.warning(f"{name}: ground state failed: {e}")
            table.add_row(name, *[e for _ in methods])
            continue
        spectrum = gs.channels[0].spectrum
        measured = float(spectrum.eps_ex[0] - spectrum.eps[-1])
        logger.info(f"{name}: measured gap {measured:.6e}, N={spectrum.n_occ}")
        result.reports.extend(
            _run_methods(gs, dV, methods, opts, gauge, table, name, measured)
        )

    result.failures = list(table.exceptions)
    return result


def iteration_ratio(
    reports: Sequence[SolverReport], channel: int, method: str
) -> float:
    """Iterations of the last occupied band over those of the first."""
    solves = sorted(
        (
            r
            for r in reports
            if r.row == SOLVE_ROW and r.channel == channel and r.method == method
        ),
        key=lambda r: r.band,
    )
    if not solves:
        raise ValueError(f"No {method} solves for channel {channel}")
    first, last = solves[0].iterations, solves[-1].iterations
    if first == 0:
        return math.inf if last else 1.0
    return last / first


def bench_groundstate(
    gs: GroundState,
    dV: LocalPotential,
    methods: Sequence[SternheimerMethod | str] = DEFAULT_METHODS,
    *,
    stern_opts: SternheimerOptions | None = None,
    gauge: GaugeKind | str = GaugeKind.MINIMAL,
) -> tuple[BenchResult, pl.DataFrame]:
    """Per-band iterations on an existing ground state, with ratio and xi per channel"""
    methods = [SternheimerMethod(m) for m in methods]
    gauge = GaugeKind(gauge)
    opts = stern_opts or SternheimerOptions()

    table = ExceptionTable(headers=[str(m) for m in methods])
    reports = _run_methods(gs, dV, methods, opts, gauge, table, "ground state", None)
    result = BenchResult(reports=reports, failures=list(table.exceptions), table=table)

    rows = []
    for k, state in enumerate(gs.channels):
        xi = spectrum_xi(state.spectrum)
        for method in methods:
            if not any(r.channel == k for r in result.solves(str(method))):
                continue
            rows.append(
                {
                    "channel": k,
                    "method": str(method),
                    "n_occ": state.spectrum.n_occ,
                    "n_ex": state.spectrum.n_ex,
                    "iteration_ratio": iteration_ratio(reports, k, str(method)),
                    "xi": xi,
                }
            )
    return result, pl.DataFrame(rows, schema=RATIO_SCHEMA)


def xi_scatter(
    seeds: Sequence[int],
    *,
    n_occ: Sequence[int] = (2, 3, 4, 5, 6),
    method: SternheimerMethod | str = SternheimerMethod.SCHUR,
    amplitude: float = RATIO_AMPLITUDE,
    stern_opts: SternheimerOptions | None = None,
    gauge: GaugeKind | str = GaugeKind.MINIMAL,
    **model_kwargs,
) -> pl.DataFrame:
    """
    Iteration ratio against xi over seeded lattice models, one row per seed.
    Model i occupies n_occ[i % len(n_occ)] bands.
    """
    frames = []
    for i, seed in enumerate(seeds):
        model = lattice_model(seed, n_occ[i % len(n_occ)], **model_kwargs)
        gs = model.prepare(seed=seed)
        dV = broadband_perturbation(gs.basis, seed, amplitude)
        _, ratios = bench_groundstate(
            gs, dV, [method], stern_opts=stern_opts, gauge=gauge
        )
        frames.append(ratios.with_columns(pl.lit(seed, dtype=pl.Int64).alias("seed")))
    return pl.concat(frames)
