"""
Block preconditioned Rayleigh-Ritz eigensolver (LOBPCG-style three-term
subspace) for the lowest bands of a Hermitian operator.

Every iterate is orthonormal and diagonalizes the operator on its span, so a
`SpectrumSlice` taken at any iteration satisfies the same invariants as the
final one.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import numpy.typing as npt
import scipy.linalg

from dfpt.errors import ConvergenceError
from dfpt.model import Operator

logger = logging.getLogger(__name__)

ORTHO_DEFECT_LIMIT = 1e-13
DIRECTION_RCOND = 1e-10


@dataclass(frozen=True)
class SpectrumSlice:
    """
    The lowest computed bands of one operator, split at `n_occ` into
    occupied bands (phi, eps) and extra bands (phi_ex, eps_ex).
    """

    vectors: npt.NDArray[np.complex128]
    eigenvalues: npt.NDArray[np.float64]
    residual_norms: npt.NDArray[np.float64]
    converged: npt.NDArray[np.bool_]
    n_occ: int
    iterations: int = 0
    h_applies: int = 0

    def __post_init__(self):
        if not 0 <= self.n_occ <= self.n_bands:
            raise ValueError(
                f"Occupied count {self.n_occ} outside [0, {self.n_bands}]"
            )

    @property
    def n_bands(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_ex(self) -> int:
        return self.n_bands - self.n_occ

    @property
    def phi(self) -> npt.NDArray[np.complex128]:
        return self.vectors[:, : self.n_occ]

    @property
    def eps(self) -> npt.NDArray[np.float64]:
        return self.eigenvalues[: self.n_occ]

    @property
    def phi_ex(self) -> npt.NDArray[np.complex128]:
        return self.vectors[:, self.n_occ :]

    @property
    def eps_ex(self) -> npt.NDArray[np.float64]:
        return self.eigenvalues[self.n_occ :]

    def with_occupied(self, n_occ: int) -> "SpectrumSlice":
        return replace(self, n_occ=n_occ)

    def truncated(self, n_bands: int) -> "SpectrumSlice":
        """Keep the lowest `n_bands` bands."""
        if not self.n_occ <= n_bands <= self.n_bands:
            raise ValueError(f"Cannot truncate {self.n_bands} bands to {n_bands}")
        return replace(
            self,
            vectors=self.vectors[:, :n_bands],
            eigenvalues=self.eigenvalues[:n_bands],
            residual_norms=self.residual_norms[:n_bands],
            converged=self.converged[:n_bands],
        )

    def orthonormality_defect(self) -> float:
        gram = self.vectors.conj().T @ self.vectors
        return float(np.max(np.abs(gram - np.eye(self.n_bands)), initial=0.0))

    def ritz_offdiagonal(self, hamiltonian_block: np.ndarray) -> float:
        """Largest off-diagonal magnitude of a projected block, relative to range."""
        off = hamiltonian_block - np.diag(np.diag(hamiltonian_block))
        spread = max(float(np.ptp(self.eigenvalues)), 1.0) if self.n_bands else 1.0
        return float(np.max(np.abs(off), initial=0.0)) / spread


type IterationCallback = Callable[[int, SpectrumSlice], None]


def _project_out(basis: np.ndarray | None, v: np.ndarray) -> np.ndarray:
    """Remove the span of orthonormal `basis` from `v` (two passes)."""
    if basis is None or basis.shape[1] == 0 or v.shape[1] == 0:
        return v
    for _ in range(2):
        v = v - basis @ (basis.conj().T @ v)
    return v


def _normalize_columns(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=0)
    keep = norms > 0
    return v[:, keep] / norms[keep]


def _orthonormal_directions(
    v: np.ndarray, against: list[np.ndarray | None]
) -> np.ndarray:
    for basis in against:
        v = _project_out(basis, v)
    v = _normalize_columns(v)
    if v.shape[1] == 0:
        return v
    v = scipy.linalg.orth(v, rcond=DIRECTION_RCOND)
    for basis in against:
        v = _project_out(basis, v)
    return _normalize_columns(v)


def _rayleigh_ritz(
    basis: np.ndarray, h_basis: np.ndarray, n_keep: int
) -> tuple[np.ndarray, np.ndarray]:
    projected = basis.conj().T @ h_basis
    projected = 0.5 * (projected + projected.conj().T)
    values, coeffs = scipy.linalg.eigh(projected)
    return values[:n_keep], coeffs[:, :n_keep]


def _reorthonormalize(x: np.ndarray, hx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gram = x.conj().T @ x
    gram = 0.5 * (gram + gram.conj().T)
    upper = scipy.linalg.cholesky(gram, lower=False)
    inv = scipy.linalg.solve_triangular(upper, np.eye(upper.shape[0], dtype=x.dtype))
    return x @ inv, hx @ inv


def initial_guess(
    op: Operator,
    n_bands: int,
    rng: np.random.Generator | None = None,
) -> npt.NDArray[np.complex128]:
    """
    Coordinate vectors at the lowest diagonal entries of `op`, or seeded
    random vectors when an `rng` is given.
    """
    if rng is not None:
        return rng.standard_normal((op.size, n_bands)) + 1j * rng.standard_normal(
            (op.size, n_bands)
        )
    order = np.argsort(op.diagonal(), kind="stable")[:n_bands]
    guess = np.zeros((op.size, n_bands), dtype=np.complex128)
    guess[order, np.arange(n_bands)] = 1.0
    return guess


def block_eigensolve(
    op: Operator,
    n_conv: int,
    n_ex: int,
    tol: float,
    max_iter: int,
    *,
    guess: np.ndarray | None = None,
    locked: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    precond_shift: float = 1.0,
    callback: IterationCallback | None = None,
) -> SpectrumSlice:
    """
    Lowest `n_conv + n_ex` eigenpairs of `op`, restricted to the orthogonal
    complement of `locked` if given. Iterates until the first `n_conv` bands
    have residual norm <= tol; the extra bands keep whatever residual they
    have at that point.
    """
    n_bands = n_conv + n_ex
    n_locked = 0 if locked is None else locked.shape[1]
    if n_conv < 0 or n_ex < 0 or n_bands == 0:
        raise ValueError(f"Invalid band counts n_conv={n_conv}, n_ex={n_ex}")
    if n_bands + n_locked > op.size:
        raise ValueError(
            f"Requested {n_bands} bands (+{n_locked} locked) "
            f"exceed basis size {op.size}"
        )
    if not tol > 0:
        raise ValueError(f"Eigensolver tolerance must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")

    precond = op.preconditioner_diagonal(precond_shift)
    applies = 0

    def _apply(v: np.ndarray) -> np.ndarray:
        nonlocal applies
        applies += v.shape[1]
        return op.apply(v)

    if locked is not None:
        locked = np.asarray(locked, dtype=np.complex128)
        # Coordinate vectors may lie in the locked span
        rng = rng or np.random.default_rng(0)

    if guess is None:
        guess = initial_guess(op, n_bands, rng)
    else:
        guess = np.asarray(guess, dtype=np.complex128)[:, :n_bands]

    x = _orthonormal_directions(guess, [locked])
    if x.shape[1] < n_bands:
        filler_rng = rng or np.random.default_rng(0)
        filler = initial_guess(op, n_bands, filler_rng)
        x = _orthonormal_directions(np.hstack([x, filler]), [locked])[:, :n_bands]
    hx = _apply(x)
    values, coeffs = _rayleigh_ritz(x, hx, n_bands)
    x, hx = x @ coeffs, hx @ coeffs

    directions: np.ndarray | None = None
    iteration = 0

    def _snapshot(residual_norms: np.ndarray) -> SpectrumSlice:
        return SpectrumSlice(
            vectors=x.copy(),
            eigenvalues=values.copy(),
            residual_norms=residual_norms,
            converged=residual_norms <= tol,
            n_occ=n_conv,
            iterations=iteration,
            h_applies=applies,
        )

    while True:
        residuals = hx - x * values
        residual_norms = np.linalg.norm(residuals, axis=0)
        snapshot = _snapshot(residual_norms)
        if callback is not None:
            callback(iteration, snapshot)

        n_done = int(np.sum(residual_norms[:n_conv] <= tol))
        logger.debug(
            f"Eigensolver iteration {iteration}: {n_done}/{n_conv} converged, "
            f"max residual {residual_norms[:n_conv].max(initial=0.0):.3e}"
        )
        if n_done == n_conv:
            break
        if iteration >= max_iter:
            raise ConvergenceError(
                f"Eigensolver reached {max_iter} iterations with "
                f"{n_conv - n_done} of {n_conv} bands unconverged",
                partial=snapshot,
                history=[float(residual_norms[:n_conv].max())],
            )

        iteration += 1
        active = residual_norms > tol
        candidates = precond[:, None] * residuals[:, active]
        if directions is not None:
            candidates = np.hstack([candidates, directions])
        z = _orthonormal_directions(candidates, [locked, x])
        if z.shape[1] == 0:
            raise ConvergenceError(
                "Eigensolver search space collapsed before convergence",
                partial=snapshot,
            )
        hz = _apply(z)

        subspace = np.hstack([x, z])
        h_subspace = np.hstack([hx, hz])
        values, coeffs = _rayleigh_ritz(subspace, h_subspace, n_bands)
        directions = z @ coeffs[n_bands:, :]
        x, hx = subspace @ coeffs, h_subspace @ coeffs

        defect = np.max(np.abs(x.conj().T @ x - np.eye(n_bands)))
        if defect > ORTHO_DEFECT_LIMIT:
            logger.debug(f"Re-orthonormalizing block (defect {defect:.2e})")
            if locked is not None:
                x = _project_out(locked, x)
                hx = _apply(x)
            x, hx = _reorthonormalize(x, hx)
            values, coeffs = _rayleigh_ritz(x, hx, n_bands)
            x, hx = x @ coeffs, hx @ coeffs

    logger.debug(f"Eigensolver converged in {iteration} iterations ({applies} applies)")
    return snapshot
