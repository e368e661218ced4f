"""Low-rank adapter lifecycle: gradient-informed init, base shift, B-only updates, merge."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import NumericalError, ShapeError, as_matrix, project_onto, svd
from .subspace import UnifiedSubspace

SINGULAR_VALUE_FLOOR = 1e-12


class InitVariant(str, enum.Enum):
    keeplora = "keeplora"
    grad_only = "grad_only"
    grad_minus_Wp = "grad_minus_Wp"
    grad_minus_M = "grad_minus_M"
    frozen_random_A = "frozen_random_A"
    vanilla_lora = "vanilla_lora"

    @property
    def uses_gradient(self) -> bool:
        return self in _GRADIENT_VARIANTS

    @property
    def uses_principal(self) -> bool:
        return self in (InitVariant.keeplora, InitVariant.grad_minus_Wp)

    @property
    def builds_task_directions(self) -> bool:
        return self in (InitVariant.keeplora, InitVariant.grad_minus_M)

    @property
    def trains_A(self) -> bool:
        return self is InitVariant.vanilla_lora


_GRADIENT_VARIANTS = frozenset(
    {InitVariant.keeplora, InitVariant.grad_only, InitVariant.grad_minus_Wp, InitVariant.grad_minus_M})

ALL_VARIANTS = tuple(InitVariant)


class GradientInPrincipalSubspaceError(NumericalError):
    """The projected gradient has no energy left outside the protected subspace."""


@dataclass(eq=False)
class KeepLoRAAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float
    r: int
    variant: InitVariant
    shifted_base: Optional[np.ndarray] = None

    @property
    def r_eff(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def trainable_A(self) -> bool:
        return self.variant.trains_A

    def delta(self) -> np.ndarray:
        """The additive term ``(alpha/r) A B``."""
        return self.scale * (self.A @ self.B)

    def output(self, x) -> np.ndarray:
        """Adapter contribution ``(alpha/r) x A B`` for row-major inputs ``x``."""
        return self.scale * ((np.asarray(x) @ self.A) @ self.B)


def projected_gradient(g, u: Optional[UnifiedSubspace], variant: InitVariant) -> np.ndarray:
    """The matrix whose top singular vectors seed ``A`` for each gradient variant."""
    g = as_matrix(g, "gradient")
    if variant is InitVariant.grad_only:
        return g
    if u is None:
        raise ValueError(f"variant {variant.value} needs a unified subspace")
    if u.ambient_dim != g.shape[0]:
        raise ShapeError(f"gradient has {g.shape[0]} rows, subspace lives in R^{u.ambient_dim}")
    if variant is InitVariant.keeplora:
        return g - project_onto(g, u.Wp) - project_onto(g, u.M)
    if variant is InitVariant.grad_minus_Wp:
        return g - project_onto(g, u.Wp)
    if variant is InitVariant.grad_minus_M:
        return g - project_onto(g, u.M)
    raise ValueError(f"variant {variant.value} does not use the gradient")


def random_orthonormal_frame(d_in: int, r: int, rng: np.random.Generator) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((d_in, r)))
    return q * np.where(np.diag(rr) < 0, -1.0, 1.0)


def init_from_gradient(g, u: Optional[UnifiedSubspace], r: int, alpha: float,
                       variant: InitVariant = InitVariant.keeplora, *,
                       rng: Optional[np.random.Generator] = None,
                       init_std: Optional[float] = None,
                       w=None) -> KeepLoRAAdapter:
    """Build an adapter for a ``d_in x d_out`` layer from its task gradient ``g``.

    Gradient variants take the SVD of the (variant-specific) projected gradient
    and set ``A = U[:, :r_eff]``, ``B = diag(S[:r_eff]) V[:, :r_eff]^T`` where
    ``r_eff`` counts singular values above 1e-12, capped at ``r``.
    ``frozen_random_A`` draws a seeded orthonormal ``A`` and ``vanilla_lora``
    draws ``A ~ N(0, init_std^2)``; both start with ``B = 0``.

    If ``w`` is given the base is shifted immediately (see :func:`shift_base`).
    """
    variant = InitVariant(variant)
    if r < 1:
        raise ValueError("rank r must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    g = as_matrix(g, "gradient")
    d_in, d_out = g.shape
    if variant.uses_gradient:
        g_hat = projected_gradient(g, u, variant)
        res = svd(g_hat)
        r_eff = min(r, int(np.count_nonzero(res.S > SINGULAR_VALUE_FLOOR)))
        if r_eff == 0:
            raise GradientInPrincipalSubspaceError(
                f"gradient fully inside principal subspace ({variant.value}, shape {d_in}x{d_out})")
        A = res.U[:, :r_eff].copy()
        B = res.S[:r_eff, None] * res.V[:, :r_eff].T
    else:
        if rng is None:
            raise ValueError(f"variant {variant.value} needs an rng")
        r_eff = min(r, d_in)
        if variant is InitVariant.frozen_random_A:
            A = random_orthonormal_frame(d_in, r_eff, rng)
        else:
            std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
            A = std * rng.standard_normal((d_in, r_eff))
        B = np.zeros((r_eff, d_out))
    if not variant.trains_A:
        A.setflags(write=False)
    adapter = KeepLoRAAdapter(A=A, B=np.ascontiguousarray(B), alpha=float(alpha), r=int(r), variant=variant)
    if w is not None:
        shift_base(w, adapter)
    return adapter


def shift_base(w, adapter: KeepLoRAAdapter) -> None:
    """Set ``W' = W - (alpha/r) A B`` so the adapted layer starts out equal to ``W``."""
    w = as_matrix(w, "w")
    if w.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise ShapeError(f"weight shape {w.shape} does not match adapter "
                         f"{adapter.A.shape[0]}x{adapter.B.shape[1]}")
    adapter.shifted_base = w - adapter.delta()


def effective_weight(adapter: KeepLoRAAdapter) -> np.ndarray:
    if adapter.shifted_base is None:
        raise ValueError("adapter base has not been shifted yet")
    return adapter.shifted_base + adapter.delta()


def adapter_grads(adapter: KeepLoRAAdapter, g_w) -> tuple[Optional[np.ndarray], np.ndarray]:
    """Chain rule from the effective-weight gradient to ``(dL/dA, dL/dB)``.

    ``dL/dA`` is None when ``A`` is frozen.
    """
    g_w = as_matrix(g_w, "g_w")
    s = adapter.scale
    dB = s * (adapter.A.T @ g_w)
    dA = s * (g_w @ adapter.B.T) if adapter.trainable_A else None
    return dA, dB


def sgd_step_B(adapter: KeepLoRAAdapter, g_w, eta: float) -> np.ndarray:
    """One plain gradient step on ``B``; returns the applied increment ``dB``.

    The effective weight moves by ``-(eta alpha^2 / r^2) A A^T g_w``.
    """
    _, grad_B = adapter_grads(adapter, g_w)
    step = -eta * grad_B
    adapter.B = adapter.B + step
    return step


def merge(adapter: KeepLoRAAdapter) -> np.ndarray:
    """Fold the adapter back into a plain weight for the next task."""
    return effective_weight(adapter)
