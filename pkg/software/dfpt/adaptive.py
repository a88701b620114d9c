"""
Conditioning estimates for the Schur-complement Sternheimer solve and the
adaptive choice of the number of extra bands.

With extra bands up to eps_tilde, the conditioning of band n scales like
sqrt(1 / (eps_tilde - eps_n)) up to an unknown constant, so the spread across
occupied bands is measured by the C-free ratio
xi = sqrt((eps_tilde - eps_1) / (eps_tilde - eps_N)).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import polars as pl
import scipy.linalg

from dfpt.eigensolver import SpectrumSlice, block_eigensolve
from dfpt.errors import BudgetExhaustedError, InfeasibleError
from dfpt.groundstate import GroundState
from dfpt.utils.concurrency import run_all

logger = logging.getLogger(__name__)

TOLERANCE_DIVISOR = 50
REFINE_MAX_ITER = 500

TRACE_SCHEMA = pl.Schema(
    {
        "step": pl.Int64,
        "n_ex": pl.Int64,
        "xi": pl.Float64,
        "tol": pl.Float64,
        "h_applies": pl.Int64,
    }
)


def xi_ratio(eps1: float, epsN: float, eps_last_extra: float) -> float:
    if eps_last_extra <= epsN:
        raise ValueError(
            f"Last extra band {eps_last_extra} must lie above eps_N={epsN}"
        )
    if epsN < eps1:
        raise ValueError(f"eps_N={epsN} below eps_1={eps1}")
    return math.sqrt((eps_last_extra - eps1) / (eps_last_extra - epsN))


def bauer_fike_lower(eps_ritz: float, res_norm: float) -> float:
    """Certified lower bound on the exact eigenvalue matched by a Ritz pair."""
    if res_norm < 0:
        raise ValueError(f"Residual norm must be nonnegative, got {res_norm}")
    return eps_ritz - res_norm


def perturbation_bound(
    h0: np.ndarray, w: np.ndarray, alpha: float
) -> npt.NDArray[np.float64]:
    """
    Bounds b_i with |nu_i(H0 + W) - nu_i(H0)| <= b_i, where
    b_i = (nu_i(H0) + alpha) |(H0 + alpha)^{-1/2} W (H0 + alpha)^{-1/2}|.
    """
    h0 = np.asarray(h0)
    w = np.asarray(w)
    if h0.shape != w.shape or h0.ndim != 2 or h0.shape[0] != h0.shape[1]:
        raise ValueError(f"Shape mismatch: H0 {h0.shape}, W {w.shape}")

    shifted, vectors = scipy.linalg.eigh(h0 + alpha * np.eye(h0.shape[0]))
    if shifted.min() <= 0:
        raise ValueError(
            "H0 + alpha is not positive definite "
            f"(lowest eigenvalue {shifted.min():.3e})"
        )
    inv_sqrt = (vectors / np.sqrt(shifted)) @ vectors.conj().T
    scaled = inv_sqrt @ w @ inv_sqrt
    scaled = 0.5 * (scaled + scaled.conj().T)
    relative = float(np.max(np.abs(scipy.linalg.eigvalsh(scaled)), initial=0.0))
    return shifted * relative


@dataclass(frozen=True)
class ChannelConditioning:
    channel: int
    eps_first: float
    eps_last_occupied: float
    eps_last_extra: float
    last_residual: float
    xi: float
    xi_bauer_fike: float
    kappa: npt.NDArray[np.float64]


def _xi_or_inf(eps1: float, epsN: float, eps_last: float) -> float:
    if eps_last <= epsN:
        return math.inf
    return xi_ratio(eps1, epsN, eps_last)


def spectrum_xi(spectrum: SpectrumSlice) -> float:
    if spectrum.n_ex == 0 or spectrum.n_occ == 0:
        return math.inf
    return _xi_or_inf(
        float(spectrum.eps[0]), float(spectrum.eps[-1]), float(spectrum.eps_ex[-1])
    )


def conditioning_report(gs: GroundState) -> list[ChannelConditioning]:
    """xi from raw Ritz values, alongside its Bauer-Fike corrected variant."""
    rows = []
    for k, state in enumerate(gs.channels):
        spectrum = state.spectrum
        if spectrum.n_ex == 0:
            logger.warning(f"Channel {k} has no extra bands, conditioning unknown")
            continue
        eps_last = float(spectrum.eps_ex[-1])
        last_residual = float(spectrum.residual_norms[-1])
        eps1, epsN = float(spectrum.eps[0]), float(spectrum.eps[-1])
        rows.append(
            ChannelConditioning(
                channel=k,
                eps_first=eps1,
                eps_last_occupied=epsN,
                eps_last_extra=eps_last,
                last_residual=last_residual,
                xi=_xi_or_inf(eps1, epsN, eps_last),
                xi_bauer_fike=_xi_or_inf(
                    eps1, epsN, bauer_fike_lower(eps_last, last_residual)
                ),
                kappa=1.0 / (eps_last - spectrum.eps),
            )
        )
    return rows


def _random_orthonormal(
    rng: np.random.Generator, basis: np.ndarray
) -> npt.NDArray[np.complex128]:
    v = rng.standard_normal(basis.shape[0]) + 1j * rng.standard_normal(basis.shape[0])
    for _ in range(2):
        v = v - basis @ (basis.conj().T @ v)
        v = v / np.linalg.norm(v)
    return v


def adapt_bands(
    gs: GroundState,
    channel_id: int,
    xi_target: float,
    max_added: int,
    *,
    seed: int | None = None,
    max_iter: int = REFINE_MAX_ITER,
) -> tuple[SpectrumSlice, pl.DataFrame]:
    """
    Add extra bands one at a time until xi <= xi_target. Each step appends a
    random vector orthonormal to all current bands and refines the extra
    block against the occupied bands at tolerance
    (eps_tilde_{N+N_ex-1} - eps_N) / 50.
    """
    if not xi_target > 1:
        raise ValueError(f"xi_target must exceed 1, got {xi_target}")
    if max_added < 0:
        raise ValueError(f"max_added must be nonnegative, got {max_added}")

    state = gs.channels[channel_id]
    channel = state.channel
    spectrum = state.spectrum
    n_occ = spectrum.n_occ
    rng = np.random.default_rng([gs.seed if seed is None else seed, channel_id])

    rows: list[dict] = []

    def _trace() -> pl.DataFrame:
        return pl.DataFrame(rows, schema=TRACE_SCHEMA)

    xi = spectrum_xi(spectrum)
    logger.info(f"Channel {channel_id}: initial xi={xi:.4f} with N_ex={spectrum.n_ex}")
    step = 0
    while xi > xi_target:
        if step == max_added:
            raise BudgetExhaustedError(
                f"Channel {channel_id}: xi={xi:.4f} still above {xi_target} after "
                f"adding {max_added} bands",
                trace=_trace(),
                partial=spectrum,
            )
        if spectrum.n_bands + 1 > channel.size:
            raise InfeasibleError(
                f"Channel {channel_id}: basis of size {channel.size} exhausted"
            )

        step += 1
        new_vector = _random_orthonormal(rng, spectrum.vectors)
        reference = float(spectrum.eigenvalues[-1])
        tol = max(
            (reference - float(spectrum.eigenvalues[n_occ - 1])) / TOLERANCE_DIVISOR,
            gs.eigensolver_tol,
        )
        guess = np.column_stack([spectrum.phi_ex, new_vector])
        refined = block_eigensolve(
            channel,
            guess.shape[1],
            0,
            tol,
            max_iter,
            guess=guess,
            locked=spectrum.phi,
            rng=rng,
        )

        spectrum = SpectrumSlice(
            vectors=np.hstack([spectrum.phi, refined.vectors]),
            eigenvalues=np.concatenate([spectrum.eps, refined.eigenvalues]),
            residual_norms=np.concatenate(
                [spectrum.residual_norms[:n_occ], refined.residual_norms]
            ),
            converged=np.concatenate([spectrum.converged[:n_occ], refined.converged]),
            n_occ=n_occ,
            iterations=spectrum.iterations + refined.iterations,
            h_applies=spectrum.h_applies + refined.h_applies,
        )
        xi = spectrum_xi(spectrum)
        rows.append(
            {
                "step": step,
                "n_ex": spectrum.n_ex,
                "xi": xi,
                "tol": tol,
                "h_applies": refined.h_applies,
            }
        )
        logger.debug(
            f"Channel {channel_id} step {step}: N_ex={spectrum.n_ex} xi={xi:.4f} "
            f"tol={tol:.2e} ({refined.h_applies} applies)"
        )

    logger.info(f"Channel {channel_id}: final xi={xi:.4f} with N_ex={spectrum.n_ex}")
    return spectrum, _trace()


def adapt_groundstate(
    gs: GroundState, xi_target: float, max_added: int, *, seed: int | None = None
) -> tuple[GroundState, pl.DataFrame]:
    """Adapt every channel; the trace gains a `channel` column."""
    outcomes = run_all(
        [
            lambda k=k: adapt_bands(gs, k, xi_target, max_added, seed=seed)
            for k in range(len(gs.channels))
        ],
        return_exceptions=True,
    )

    traces = []
    adapted = gs
    for k, outcome in enumerate(outcomes):
        if isinstance(outcome, BudgetExhaustedError):
            trace = outcome.trace
        elif isinstance(outcome, BaseException):
            continue
        else:
            spectrum, trace = outcome
            adapted = adapted.with_spectrum(k, spectrum)
        traces.append(trace.with_columns(pl.lit(k, dtype=pl.Int64).alias("channel")))

    frame = _combined(traces)
    failures = [o for o in outcomes if isinstance(o, BaseException)]
    if failures:
        first = failures[0]
        if isinstance(first, BudgetExhaustedError):
            first.trace = frame
        raise first
    return adapted, frame


def _combined(traces: list[pl.DataFrame]) -> pl.DataFrame:
    schema = pl.Schema({"channel": pl.Int64, **TRACE_SCHEMA})
    if not traces:
        return pl.DataFrame(schema=schema)
    return pl.concat(traces).select(schema.names())
