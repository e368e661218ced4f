"""Dense linear algebra primitives.

Matrices are plain ``float64`` numpy arrays. Every routine here is a pure
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DROP_TOL = 1e-8
ORTHONORMAL_TOL = 1e-10
TIE_RTOL = 1e-12


class NumericalError(ArithmeticError):
    """Raised when a decomposition fails to converge or has no usable energy."""


class ShapeError(ValueError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return ``m`` as a 2-D finite float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


@dataclass(frozen=True, eq=False)
class OrthonormalBasis:
    """Columns of ``basis`` are orthonormal vectors in R^ambient_dim."""

    ambient_dim: int
    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != self.ambient_dim:
            raise ShapeError(
                f"basis shape {b.shape} does not match ambient_dim {self.ambient_dim}")
        if b.shape[1] > self.ambient_dim:
            raise ShapeError(f"{b.shape[1]} columns exceed ambient_dim {self.ambient_dim}")
        if b.shape[1]:
            err = np.max(np.abs(b.T @ b - np.eye(b.shape[1])))
            if err > ORTHONORMAL_TOL:
                raise ValueError(f"basis columns are not orthonormal (max error {err:.3e})")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def empty(cls, ambient_dim: int) -> "OrthonormalBasis":
        return cls(ambient_dim, np.zeros((ambient_dim, 0)))

    def concat(self, other: "OrthonormalBasis") -> "OrthonormalBasis":
        if other.ambient_dim != self.ambient_dim:
            raise ShapeError("ambient dimensions differ")
        return OrthonormalBasis(self.ambient_dim, np.hstack([self.basis, other.basis]))


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each U column made non-negative. Magnitudes
    # within TIE_RTOL of the column maximum count as ties (LAPACK can return
    # "equal" entries an ulp apart); the lowest row wins.
    if U.shape[1] == 0:
        return U, V
    mag = np.abs(U)
    near = mag >= mag.max(axis=0) * (1.0 - TIE_RTOL)
    idx = np.argmax(near, axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def svd(m) -> SvdResult:
    """Thin SVD ``m = U diag(S) V^T`` with a deterministic sign convention.

    ``U`` is ``rows x k`` and ``V`` is ``cols x k`` with ``k = min(rows, cols)``.
    Singular values come back non-increasing. For every column of ``U`` the
    entry of largest magnitude is non-negative (ties go to the lowest row
    index) and the matching column of ``V`` is flipped along with it.
    """
    a = as_matrix(m)
    if a.size == 0:
        raise ShapeError("svd of an empty matrix")
    try:
        U, S, Vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix") from exc
    U, V = _fix_signs(U, Vt.T)
    return SvdResult(np.ascontiguousarray(U), S, np.ascontiguousarray(V))


def energy_rank(singular_values, epsilon: float) -> int:
    """Smallest ``p`` whose leading squared singular values hold ``epsilon`` of the total."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    s = np.asarray(singular_values, dtype=np.float64)
    energy = np.cumsum(s * s)
    if s.size == 0 or energy[-1] <= 0.0:
        raise NumericalError("no energy to threshold: all singular values are zero")
    return int(np.argmax(energy >= epsilon * energy[-1])) + 1


def project_onto(x, q: OrthonormalBasis) -> np.ndarray:
    """Orthogonal projection ``Q Q^T x`` onto span(q)."""
    x = as_matrix(x, "x")
    if x.shape[0] != q.ambient_dim:
        raise ShapeError(f"x has {x.shape[0]} rows, basis lives in R^{q.ambient_dim}")
    if q.k == 0:
        return np.zeros_like(x)
    return q.basis @ (q.basis.T @ x)


def orthonormalize_against(candidates, existing: OrthonormalBasis,
                           drop_tol: float = DEFAULT_DROP_TOL) -> tuple[OrthonormalBasis, int]:
    """Gram-Schmidt the candidate columns against ``existing`` and each other.

    Each candidate is projected off the current span twice (classical
    Gram-Schmidt with one re-orthogonalization pass). Columns whose remaining
    norm falls below ``drop_tol``, or that would push the combined column count
    past the ambient dimension, are dropped.

    Returns
    -------
    (OrthonormalBasis, int)
        The new columns only (not including ``existing``) and the number of
        candidates dropped.
    """
    c = as_matrix(candidates, "candidates")
    d = existing.ambient_dim
    if c.shape[0] != d:
        raise ShapeError(f"candidates have {c.shape[0]} rows, basis lives in R^{d}")
    capacity = d - existing.k
    span = existing.basis
    accepted: list[np.ndarray] = []
    dropped = 0
    for j in range(c.shape[1]):
        if len(accepted) >= capacity:
            dropped += c.shape[1] - j
            break
        v = c[:, j].copy()
        for _ in range(2):
            if span.shape[1]:
                v -= span @ (span.T @ v)
        norm = np.linalg.norm(v)
        if norm < drop_tol:
            dropped += 1
            continue
        v /= norm
        accepted.append(v)
        span = np.column_stack([span, v])
    new = np.column_stack(accepted) if accepted else np.zeros((d, 0))
    return OrthonormalBasis(d, new), dropped
