"""Fusing a sequence of conformal layers into ``(L_M, Q)``.

A conformal layer is a run of linear operators ``U`` closed by one ReSPro.
For ``k`` of them the whole network is

    Y = L_M X,   Y[-1] += X^T Q X

with ``L_M`` the product of every ``F_M U`` and ``Q`` the only nonzero
(bottom) slice of the fused rank-3 tensor.  ``Q`` is accumulated in closed
form: entering layer ``l`` scales the running ``Q`` by ``alpha_l / 2`` and
adds ``(1 / 2 alpha_l) P_l^T P_l`` where ``P_l`` holds the data rows of
``U_l ... U_1``.  This relies on every ``U`` passing the homogeneous
coefficient through, which is checked when segments are built;
:func:`dense_expand_LT` evaluates the unsimplified tensor sum for small
networks as the cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .homogeneous import EPS, AllocationCounter, Batch, HomVector, SparseOperator
from .lowering import LoweringError, lower_layer
from .netspec import NetworkSpec
from .reference import sequential_forward
from .respro import ResProParams, resolve_alphas, respro_tensors

__all__ = [
    "StaleCacheError",
    "CacheMismatchError",
    "DegenerateOutputError",
    "Segment",
    "FusedCache",
    "ConformalSequence",
    "build_cache",
    "fused_forward",
    "fused_forward_batch",
    "invalidate",
    "is_valid",
    "dense_expand_LM",
    "dense_expand_LT",
    "nested_dense_forward",
]


class StaleCacheError(RuntimeError):
    pass


class CacheMismatchError(AssertionError):
    """Closed-form ``Q`` disagrees with the dense tensor expansion."""


class DegenerateOutputError(ArithmeticError):
    """Output homogeneous coefficient is zero or negative."""


@dataclass(frozen=True)
class Segment:
    """Linear run ``U`` closed by ReSPro with radius ``alpha``.

    ``alpha is None`` marks a trailing linear-only run.
    """

    U: SparseOperator
    alpha: float | None
    layers: tuple[int, ...]


@dataclass
class FusedCache:
    L_M: SparseOperator
    Q: SparseOperator
    d_in: int
    d_out: int
    valid: bool = True

    def __post_init__(self):
        if self.L_M.shape != (self.d_out + 1, self.d_in + 1):
            raise ValueError(f"L_M has shape {self.L_M.shape}, expected {(self.d_out + 1, self.d_in + 1)}")
        if self.Q.shape != (self.d_in + 1, self.d_in + 1):
            raise ValueError(f"Q has shape {self.Q.shape}, expected square of size {self.d_in + 1}")

    @property
    def nnz(self) -> tuple[int, int]:
        return self.L_M.nnz, self.Q.nnz

    def astype(self, dtype) -> "FusedCache":
        return FusedCache(self.L_M.astype(dtype), self.Q.astype(dtype), self.d_in, self.d_out, self.valid)


def _check_passthrough(U: SparseOperator, where: str) -> None:
    m = U.csr
    last_col = m[:, -1].toarray().ravel()
    last_row = m[-1, :].toarray().ravel()
    if np.any(last_col[:-1] != 0) or np.any(last_row[:-1] != 0) or last_row[-1] == 0:
        raise LoweringError(f"{where}: matrix does not pass the homogeneous coefficient through")


class ConformalSequence:
    """A network together with its lazily rebuilt fused cache.

    ``forward`` follows the two-branch inference procedure: in training mode
    the cache is invalidated and the layers run one by one; otherwise the
    cache is (re)built if needed and applied in one shot.
    """

    def __init__(
        self,
        net: NetworkSpec,
        *,
        lowering: str = "auto",
        whole_tensor_bound: bool = False,
        debug: bool = False,
    ):
        self.lowering = lowering
        self.whole_tensor_bound = whole_tensor_bound
        self.debug = debug
        self._net = net
        self._alphas: list[float | None] | None = None
        self._segments: list[Segment] | None = None
        self._cache: FusedCache | None = None

    @property
    def net(self) -> NetworkSpec:
        return self._net

    @net.setter
    def net(self, net: NetworkSpec) -> None:
        self._net = net
        self.invalidate()

    def update_layer(self, index: int, **changes) -> None:
        self.net = self._net.replace_layer(index, **changes)

    @property
    def alphas(self) -> list[float | None]:
        if self._alphas is None:
            self._alphas = resolve_alphas(self._net, self.whole_tensor_bound)
        return self._alphas

    @property
    def cache(self) -> FusedCache | None:
        return self._cache

    def is_valid(self) -> bool:
        return self._cache is not None and self._cache.valid

    def invalidate(self) -> None:
        if self._cache is not None:
            self._cache.valid = False
        self._cache = None
        self._segments = None
        self._alphas = None

    def segments(self) -> list[Segment]:
        if self._segments is not None:
            return self._segments
        net = self._net
        segments = []
        U = SparseOperator.identity(net.d_in + 1)
        run: list[int] = []
        for i, (layer, alpha) in enumerate(zip(net.layers, self.alphas)):
            if layer.is_linear:
                try:
                    Ui = lower_layer(layer, net.shapes[i], net.order, self.lowering)
                except (LoweringError, ValueError) as exc:
                    raise LoweringError(f"layers[{i}] ({layer.kind}): {exc}") from None
                _check_passthrough(Ui, f"layers[{i}] ({layer.kind})")
                if Ui.cols != U.rows:
                    raise LoweringError(f"layers[{i}] ({layer.kind}): expects {Ui.cols - 1} inputs, got {U.rows - 1}")
                U = Ui @ U
                run.append(i)
            else:
                segments.append(Segment(U, alpha, tuple(run + [i])))
                U = SparseOperator.identity(net.shapes[i + 1].size + 1)
                run = []
        if run:
            segments.append(Segment(U, None, tuple(run)))
        self._segments = segments
        return segments

    def build_cache(self) -> FusedCache:
        self._cache = build_cache(self)
        return self._cache

    def _ensure_cache(self) -> FusedCache:
        if not self.is_valid():
            self.build_cache()
        return self._cache

    def forward(
        self,
        x,
        *,
        training: bool = False,
        counter: AllocationCounter | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Decoded outputs for one flat input or an ``(n, d_in)`` batch."""
        x = np.asarray(x, dtype=np.float64)
        if training:
            self.invalidate()
            return sequential_forward(self._net, x, alphas=self.alphas, counter=counter, rng=rng)
        cache = self._ensure_cache()
        single = x.ndim == 1
        Y = fused_forward_batch(cache, Batch.encode(np.atleast_2d(x), self._net.encoding), counter)
        homo = Y.coeffs[:, -1]
        if np.any(homo <= 0):
            raise DegenerateOutputError("non-positive output homogeneous coefficient")
        out = Y.decode()
        return out[0] if single else out


def build_cache(seq: ConformalSequence) -> FusedCache:
    net = seq.net
    n = net.d_in + 1
    L = SparseOperator.identity(n)
    P = SparseOperator.identity(n)
    Q = sp.csr_matrix((n, n))
    for seg in seq.segments():
        if seg.alpha is None:
            L = seg.U @ L
            continue
        a = seg.alpha
        P = seg.U @ P
        data = P.csr[:-1]
        Q = Q * (0.5 * a) + (data.T @ data) * (1.0 / (2.0 * a))
        fm, _ = respro_tensors(ResProParams(a, seg.U.rows - 1))
        L = fm @ (seg.U @ L)
    cache = FusedCache(L, SparseOperator(Q), net.d_in, net.d_out)
    if cache.L_M.csr[-1, -1] == 0:
        raise LoweringError("fused operator annihilates the homogeneous coefficient")
    if seq.debug and _dense_ok(seq):
        _verify_against_dense(seq, cache)
    return cache


def _apply(cache: FusedCache, X: np.ndarray, counter: AllocationCounter | None) -> np.ndarray:
    # X is (n, d_in + 1); every sample goes through identical arithmetic.
    if not cache.valid:
        raise StaleCacheError("stale cache")
    if X.shape[1] != cache.d_in + 1:
        raise ValueError(f"input has {X.shape[1] - 1} data coefficients, cache expects {cache.d_in}")
    XT = np.ascontiguousarray(X.T)
    Y = cache.L_M.csr @ XT
    QX = cache.Q.csr @ XT
    if counter is not None:
        counter.request(Y.size)
        counter.request(QX.size)
    # Row-wise contiguous reduction keeps the summation order per sample
    # independent of the batch size.
    Y = np.ascontiguousarray(Y.T)
    Y[:, -1] += (X * np.ascontiguousarray(QX.T)).sum(axis=1)
    return Y


def fused_forward(cache: FusedCache, X: HomVector, counter: AllocationCounter | None = None) -> HomVector:
    return HomVector(_apply(cache, X.coeffs[None, :], counter)[0])


def fused_forward_batch(cache: FusedCache, b: Batch, counter: AllocationCounter | None = None) -> Batch:
    return Batch(_apply(cache, b.coeffs, counter))


def invalidate(seq: ConformalSequence) -> None:
    seq.invalidate()


def is_valid(seq: ConformalSequence) -> bool:
    return seq.is_valid()


# -- dense brute force -------------------------------------------------------
#
# Tensor conventions: (T X)[i, a] = sum_b T[i, a, b] X[b]; a matrix on the
# left contracts the first tensor axis, on the right the last one; a tensor
# "transpose" swaps the first two axes.

def _t(T):
    return T.transpose(1, 0, 2)


def _mt(A, T):
    return np.einsum("ij,jab->iab", A, T)


def _tm(T, B):
    return np.einsum("iaj,jb->iab", T, B)


def _dense_layers(seq: ConformalSequence):
    """Dense ``(F_M, F_T, U)`` per segment; a trailing run gets ``F_M = I, F_T = 0``."""
    out = []
    for seg in seq.segments():
        U = seg.U.to_dense()
        m = U.shape[0]
        if seg.alpha is None:
            FM, FT = np.eye(m), np.zeros((m, m, m))
        else:
            fm, ft = respro_tensors(ResProParams(seg.alpha, m - 1))
            FM, FT = fm.to_dense(), ft.to_dense()
        out.append((FM, FT, U))
    return out


def _dense_ok(seq: ConformalSequence, max_d_in: int = 8, max_k: int = 3, max_dim: int = 64) -> bool:
    segs = seq.segments()
    k = sum(s.alpha is not None for s in segs)
    dims = [seq.net.d_in] + [s.U.rows - 1 for s in segs]
    return seq.net.d_in <= max_d_in and k <= max_k and max(dims) <= max_dim


def _guard(seq: ConformalSequence) -> None:
    if not _dense_ok(seq):
        raise ValueError("dense expansion is limited to d_in <= 8, k <= 3 and layer widths <= 64")


def dense_expand_LM(seq: ConformalSequence) -> np.ndarray:
    _guard(seq)
    L = np.eye(seq.net.d_in + 1)
    for FM, _, U in _dense_layers(seq):
        L = FM @ U @ L
    return L


def dense_expand_LT(seq: ConformalSequence) -> np.ndarray:
    """Full ``(d_out+1, d_in+1, d_in+1)`` tensor as the unsimplified sum over layers.

    ``sum_l (F_M^k U^k ... F_M^{l+1} U^{l+1}) (P_l^T F_T^l^T P_l)^T`` with
    ``P_l = U^l ... U^1``.
    """
    _guard(seq)
    layers = _dense_layers(seq)
    d_in1 = seq.net.d_in + 1
    LT = np.zeros((layers[-1][2].shape[0] if layers else d_in1, d_in1, d_in1))
    P = np.eye(d_in1)
    for l, (_, FT, U) in enumerate(layers):
        P = U @ P
        G = _t(_tm(_mt(P.T, _t(FT)), P))
        M = np.eye(U.shape[0])
        for FM_m, _, U_m in layers[l + 1:]:
            M = FM_m @ U_m @ M
        LT += _mt(M, G)
    return LT


def nested_dense_forward(seq: ConformalSequence, X) -> np.ndarray:
    """Apply each conformal layer in turn, ``Y = (F_M U + (U^T F_T^T U)^T Y) Y``."""
    _guard(seq)
    Y = np.asarray(X.coeffs if isinstance(X, HomVector) else X, dtype=np.float64)
    for FM, FT, U in _dense_layers(seq):
        G = _t(_tm(_mt(U.T, _t(FT)), U))
        Y = (FM @ U + G @ Y) @ Y
    return Y


def _verify_against_dense(seq: ConformalSequence, cache: FusedCache) -> None:
    LT = dense_expand_LT(seq)
    Q = cache.Q.to_dense()
    scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
    if np.abs(LT[:-1]).max(initial=0.0) > 1e-14 * scale or not np.allclose(LT[-1], Q, rtol=0, atol=1e-12 * scale):
        raise CacheMismatchError("closed-form bottom slice disagrees with the dense expansion")
    if not np.allclose(dense_expand_LM(seq), cache.L_M.to_dense(), rtol=0, atol=1e-12 * scale):
        raise CacheMismatchError("L_M disagrees with the dense product")
