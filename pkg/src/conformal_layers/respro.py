"""ReSPro activation: direct and tensor forms, inverse, Jacobian, radius estimation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .homogeneous import BottomSliceTensor, HomVector, SparseOperator
from .netspec import LayerSpec, NetworkSpec

__all__ = [
    "OutsideDomainWarning",
    "ResProParams",
    "NormBound",
    "respro_direct",
    "respro_tensors",
    "respro_closed_form",
    "respro_inverse",
    "respro_jacobian",
    "propagate_bound",
    "estimate_alpha",
    "kernel_l1_bound",
    "resolve_alphas",
]


class OutsideDomainWarning(UserWarning):
    """Input norm exceeds alpha: the map is defined but no longer invertible."""


@dataclass(frozen=True)
class ResProParams:
    alpha: float
    d: int

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if self.d < 1:
            raise ValueError("d must be >= 1")


@dataclass(frozen=True)
class NormBound:
    bound: float

    def __post_init__(self):
        if not (math.isfinite(self.bound) and self.bound >= 0):
            raise ValueError(f"norm bound must be finite and non-negative, got {self.bound}")


def respro_direct(X: HomVector, p: ResProParams) -> HomVector:
    """Data coefficients pass through; ``y'_o = (a/2) x'_o + |x'|^2 / (2a)``."""
    if X.d != p.d:
        raise ValueError(f"dimension mismatch: vector has d={X.d}, activation expects d={p.d}")
    data = X.data
    homo = 0.5 * p.alpha * X.homo + float(data @ data) / (2.0 * p.alpha)
    return HomVector(np.append(data, homo))


def respro_tensors(p: ResProParams) -> tuple[SparseOperator, BottomSliceTensor]:
    """``F_M = diag(1, ..., 1, a/2)`` and the bottom slice ``diag(1/2a, ..., 1/2a, 0)``."""
    fm = SparseOperator.diagonal(np.append(np.ones(p.d), 0.5 * p.alpha))
    slice_ = SparseOperator.diagonal(np.append(np.full(p.d, 1.0 / (2.0 * p.alpha)), 0.0))
    return fm, BottomSliceTensor(p.d + 1, slice_)


def respro_closed_form(x, alpha: float) -> np.ndarray:
    """Decoded ReSPro of a canonically encoded point: ``2 a x / (a^2 + |x|^2)``.

    Emits :class:`OutsideDomainWarning` when ``|x| > alpha``.
    """
    x = np.asarray(x, dtype=np.float64)
    n2 = float(x @ x)
    if n2 > alpha * alpha:
        warnings.warn(f"|x| = {math.sqrt(n2):.6g} exceeds alpha = {alpha:.6g}", OutsideDomainWarning, stacklevel=2)
    return (2.0 * alpha / (alpha * alpha + n2)) * x


def respro_inverse(y, alpha: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    s = float(np.linalg.norm(y))
    if s == 0.0:
        return np.zeros_like(y)
    if s > 1.0:
        raise ValueError(f"outside range: |y| = {s} > 1")
    # r = a (1 - sqrt(1 - s^2)) / s, rewritten to avoid cancellation at small s
    r = alpha * s / (1.0 + math.sqrt(max(0.0, 1.0 - s * s)))
    return (r / s) * y


def respro_jacobian(x, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    den = alpha * alpha + float(x @ x)
    return (2.0 * alpha / den) * np.eye(x.size) - (4.0 * alpha / den**2) * np.outer(x, x)


def kernel_l1_bound(weights: np.ndarray, whole_tensor: bool = False) -> float:
    """Largest per-output-channel L1 norm of a ``(C_out, C_in, *k)`` kernel.

    With ``whole_tensor`` the result is scaled by ``sqrt(C_out)`` so it bounds
    the L2 norm of the full multi-channel output rather than each channel.
    """
    w = np.asarray(weights)
    per_channel = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
    bound = float(per_channel.max())
    if whole_tensor:
        bound *= math.sqrt(w.shape[0])
    return bound


def propagate_bound(b: NormBound, layer: LayerSpec, whole_tensor: bool = False) -> NormBound:
    """Upper bound on the output L2 norm given an input bound ``b``."""
    if layer.kind.startswith("conv"):
        return NormBound(b.bound * kernel_l1_bound(layer.weights, whole_tensor))
    if layer.kind == "respro":
        return NormBound(1.0)
    return NormBound(b.bound)


def estimate_alpha(bound: NormBound) -> float:
    if bound.bound <= 0.0:
        raise ValueError("degenerate bound: ReSPro radius would be zero")
    return bound.bound


def resolve_alphas(net: NetworkSpec, whole_tensor: bool = False) -> list[float | None]:
    """Per-layer ReSPro radius (``None`` for linear layers).

    Tracking starts from a unit input norm; an explicit ``alpha`` on a layer
    wins over the estimate.
    """
    bound = NormBound(1.0)
    alphas: list[float | None] = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "respro":
            if layer.alpha is not None:
                alphas.append(float(layer.alpha))
            else:
                try:
                    alphas.append(estimate_alpha(bound))
                except ValueError as exc:
                    raise ValueError(f"layers[{i}] (respro): {exc}") from None
        else:
            alphas.append(None)
        bound = propagate_bound(bound, layer, whole_tensor)
    return alphas
