"""Principal weight subspace plus accumulated task feature directions.

For a weight ``W`` of shape ``d_in x d_out`` every basis here lives in the
``d_in``-dimensional input space of the layer. Feature matrices are
``d_in x n_samples`` (one column per sample).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    DEFAULT_DROP_TOL,
    NumericalError,
    OrthonormalBasis,
    ShapeError,
    as_matrix,
    energy_rank,
    orthonormalize_against,
    project_onto,
    svd,
)

log = logging.getLogger(__name__)

# Directions handed to append must already be this close to orthogonal.
APPEND_ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class PrincipalSubspace:
    basis: OrthonormalBasis
    retained_energy_fraction: float

    @property
    def p(self) -> int:
        return self.basis.k


@dataclass(frozen=True)
class TaskDirections:
    basis: OrthonormalBasis
    per_task_counts: tuple[int, ...] = ()
    dropped: int = 0

    def __post_init__(self):
        if sum(self.per_task_counts) != self.basis.k:
            raise ValueError("per_task_counts do not add up to the basis width")


@dataclass(frozen=True)
class TaskDirectionUpdate:
    """New directions for one task, ready for :func:`append_task_directions`."""

    directions: np.ndarray
    selected: int
    dropped: int = 0

    @property
    def m(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True)
class UnifiedSubspace:
    principal: PrincipalSubspace
    task_dirs: TaskDirections = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = self.principal.basis.ambient_dim
        if self.task_dirs is None:
            object.__setattr__(self, "task_dirs", TaskDirections(OrthonormalBasis.empty(d)))
        if self.task_dirs.basis.ambient_dim != d:
            raise ShapeError("principal and task bases live in different spaces")

    @property
    def ambient_dim(self) -> int:
        return self.principal.basis.ambient_dim

    @property
    def Wp(self) -> OrthonormalBasis:
        return self.principal.basis

    @property
    def M(self) -> OrthonormalBasis:
        return self.task_dirs.basis

    def combined(self) -> OrthonormalBasis:
        """The concatenation ``[W_p, M]``."""
        return self.Wp.concat(self.M)

    @property
    def capacity_left(self) -> int:
        return self.ambient_dim - self.Wp.k - self.M.k


def extract_principal(w, epsilon_w: float) -> PrincipalSubspace:
    """Top left singular vectors of ``w`` holding ``epsilon_w`` of its squared-singular-value energy."""
    w = as_matrix(w, "w")
    res = svd(w)
    if not np.any(res.S > 0):
        raise NumericalError("zero weight matrix has no principal subspace")
    p = energy_rank(res.S, epsilon_w)
    energy = res.S ** 2
    frac = float(energy[:p].sum() / energy.sum())
    return PrincipalSubspace(OrthonormalBasis(w.shape[0], res.U[:, :p]), frac)


def residual_project(x, u: UnifiedSubspace) -> np.ndarray:
    """``x - Wp Wp^T x - M M^T x``."""
    x = as_matrix(x, "x")
    if x.shape[0] != u.ambient_dim:
        raise ShapeError(f"x has {x.shape[0]} rows, subspace lives in R^{u.ambient_dim}")
    return x - project_onto(x, u.Wp) - project_onto(x, u.M)


def select_direction_count(kept_energy: float, residual_sv, total_energy: float,
                           epsilon_f: float) -> int:
    """Minimal ``m`` with ``kept_energy + sum_{i<=m} s_i^2 >= epsilon_f * total_energy``."""
    target = epsilon_f * total_energy
    if kept_energy >= target:
        return 0
    cum = kept_energy + np.cumsum(np.asarray(residual_sv) ** 2)
    hit = np.nonzero(cum >= target)[0]
    # Rounding can leave the full sum a hair short of the target; take everything.
    return int(hit[0]) + 1 if hit.size else int(cum.size)


def extract_task_directions(x_t, u: UnifiedSubspace, epsilon_f: float,
                            drop_tol: float = DEFAULT_DROP_TOL) -> TaskDirectionUpdate:
    """Dominant residual feature directions of one task.

    ``x_t`` is ``d_in x n_samples``. The energy already captured by ``W_p`` and
    the stored directions counts toward the ``epsilon_f`` target, so ``m`` can
    be zero when the task's features already live in the unified subspace.
    """
    if not 0.0 < epsilon_f < 1.0:
        raise ValueError(f"epsilon_f must lie in (0, 1), got {epsilon_f}")
    x_t = as_matrix(x_t, "x_t")
    if x_t.shape[1] == 0:
        raise ShapeError("feature matrix has no samples")
    d = u.ambient_dim
    x_hat = residual_project(x_t, u)
    kept = float(np.sum(project_onto(x_t, u.Wp) ** 2) + np.sum(project_onto(x_t, u.M) ** 2))
    total = float(np.sum(x_t ** 2))
    if total == 0.0:
        return TaskDirectionUpdate(np.zeros((d, 0)), 0)
    res = svd(x_hat)
    m = select_direction_count(kept, res.S, total, epsilon_f)
    new, dropped = orthonormalize_against(res.U[:, :m], u.combined(), drop_tol)
    return TaskDirectionUpdate(new.basis, m, dropped)


def append_task_directions(u: UnifiedSubspace, new_dirs, drop_tol: float = DEFAULT_DROP_TOL) -> UnifiedSubspace:
    """Return a new unified subspace with ``new_dirs`` appended to ``M``.

    Columns past the ``d_in`` capacity are dropped and counted in
    ``task_dirs.dropped``.
    """
    if isinstance(new_dirs, TaskDirectionUpdate):
        carried = new_dirs.dropped
        new_dirs = new_dirs.directions
    else:
        carried = 0
    v = as_matrix(new_dirs, "new_dirs")
    if v.shape[0] != u.ambient_dim:
        raise ShapeError(f"directions have {v.shape[0]} rows, subspace lives in R^{u.ambient_dim}")
    existing = u.combined()
    if v.shape[1] and existing.k:
        overlap = np.max(np.abs(existing.basis.T @ v))
        if overlap > APPEND_ORTHOGONALITY_TOL:
            raise ValueError(f"new directions overlap the unified subspace ({overlap:.3e})")
    added, dropped = orthonormalize_against(v, existing, drop_tol)
    if dropped:
        log.warning("dropped %d task direction(s) at capacity %d", dropped, u.ambient_dim)
    td = u.task_dirs
    task_dirs = TaskDirections(
        td.basis.concat(added),
        td.per_task_counts + (added.k,),
        td.dropped + dropped + carried,
    )
    return UnifiedSubspace(u.principal, task_dirs)
