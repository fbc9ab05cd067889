"""Homogeneous matrices for linear layers.

1-D single-channel operators are built from closed-form padding, dilation,
stride and cross-correlation factors.  Anything else (2-D, multi-channel) is
recovered by identity probing: push every basis vector through the direct
operator and read the responses off as columns.

Every matrix here maps ``(x_1, ..., x_d, x'_o)`` to ``(y_1, ..., y_m, y'_o)``
and passes the homogeneous coefficient through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .homogeneous import SparseOperator
from .netspec import LayerSpec, NetworkSpecError, ShapeSpec, conv_output_length
from .reference import FeatureVolume, apply_linear_layer

__all__ = [
    "LoweringError",
    "ConvConfig",
    "CrossCorrelationTensor",
    "padding_matrix",
    "dilation_matrix",
    "stride_matrix",
    "cross_correlation_tensor",
    "dilated_kernel",
    "conv_matrix",
    "conv_matrix_monolithic",
    "avgpool_matrix",
    "dropout_matrix",
    "flatten_matrix",
    "probe_extract_U",
    "lower_layer",
]


class LoweringError(ValueError):
    pass


def _with_corner(rows, cols, vals, shape) -> SparseOperator:
    r, c = shape
    return SparseOperator.from_triples(
        np.append(np.asarray(rows, dtype=np.int64), r - 1),
        np.append(np.asarray(cols, dtype=np.int64), c - 1),
        np.append(np.asarray(vals, dtype=np.float64), 1.0),
        shape,
    )


@dataclass(frozen=True)
class ConvConfig:
    d_x: int
    weights: tuple[float, ...]
    pad: int = 0
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        w = tuple(float(v) for v in np.ravel(self.weights))
        object.__setattr__(self, "weights", w)
        if not w or not np.all(np.isfinite(w)):
            raise LoweringError("weights must be a non-empty finite vector")
        if self.d_x < 1 or self.pad < 0 or self.dilation < 1 or self.stride < 1:
            raise LoweringError(f"invalid configuration {self}")
        if self.out_len < 1:
            raise LoweringError(
                f"degenerate output length for d_x={self.d_x}, d_w={self.d_w}, "
                f"pad={self.pad}, dilation={self.dilation}"
            )

    @property
    def d_w(self) -> int:
        return len(self.weights)

    @property
    def out_len(self) -> int:
        return conv_output_length(self.d_x, self.d_w, self.pad, self.dilation, self.stride)


def padding_matrix(d_x: int, pad: int) -> SparseOperator:
    if pad < 0:
        raise LoweringError("pad must be >= 0")
    j = np.arange(d_x)
    return _with_corner(j + pad, j, np.ones(d_x), (d_x + 2 * pad + 1, d_x + 1))


def dilation_matrix(d_w: int, dilation: int) -> SparseOperator:
    if dilation < 1:
        raise LoweringError("dilation must be >= 1")
    i = np.arange(d_w)
    return _with_corner(i, i * dilation, np.ones(d_w), (d_w + 1, (d_w - 1) * dilation + 2))


def stride_matrix(d_x: int, d_w: int, pad: int, dilation: int, stride: int) -> SparseOperator:
    span = d_x + 2 * pad - dilation * (d_w - 1) - 1
    if span < 0 or stride < 1:
        raise LoweringError("degenerate output length")
    rows = span // stride + 2
    i = np.arange(rows - 1)
    return _with_corner(i, i * stride, np.ones(rows - 1), (rows, span + 2))


@dataclass(frozen=True)
class CrossCorrelationTensor:
    """Constant rank-3 tensor ``C`` held as its slices along the first axis."""

    slices: tuple[SparseOperator, ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.slices), *self.slices[0].shape)

    def contract(self, v) -> SparseOperator:
        """``sum_i v_i C[i]`` -- a Toeplitz block with the homogeneous corner."""
        v = np.asarray(v, dtype=np.float64)
        if v.size != len(self.slices):
            raise LoweringError(f"vector of length {v.size} cannot contract a tensor of shape {self.shape}")
        out = self.slices[0].scale(v[0])
        for vi, s in zip(v[1:], self.slices[1:]):
            out = out + s.scale(vi)
        return out

    def to_dense(self) -> np.ndarray:
        return np.stack([s.to_dense() for s in self.slices])


def cross_correlation_tensor(d_x: int, d_w: int, pad: int, dilation: int) -> CrossCorrelationTensor:
    span = (d_w - 1) * dilation + 1
    length = d_x + 2 * pad
    if length < span:
        raise LoweringError("degenerate output length")
    n_out = length - span + 1
    shape = (n_out + 1, length + 1)
    slices = []
    for i in range(span):
        j = np.arange(n_out)
        slices.append(SparseOperator.from_triples(j, j + i, np.ones(n_out), shape))
    slices.append(SparseOperator.from_triples([shape[0] - 1], [shape[1] - 1], [1.0], shape))
    return CrossCorrelationTensor(tuple(slices))


def dilated_kernel(weights, dilation: int) -> np.ndarray:
    """``W^T D``: the kernel spread out by the dilation rate, homogeneous 1 last."""
    w = np.append(np.asarray(weights, dtype=np.float64), 1.0)
    D = dilation_matrix(w.size - 1, dilation)
    return D.csr.T @ w


def conv_matrix(cfg: ConvConfig) -> SparseOperator:
    """``S (W D C) P`` assembled from its factors."""
    C = cross_correlation_tensor(cfg.d_x, cfg.d_w, cfg.pad, cfg.dilation)
    WDC = C.contract(dilated_kernel(cfg.weights, cfg.dilation))
    S = stride_matrix(cfg.d_x, cfg.d_w, cfg.pad, cfg.dilation, cfg.stride)
    P = padding_matrix(cfg.d_x, cfg.pad)
    return S @ WDC @ P


def conv_matrix_monolithic(cfg: ConvConfig) -> SparseOperator:
    """The same operator written entry by entry, without factors."""
    m, t = np.meshgrid(np.arange(cfg.out_len), np.arange(cfg.d_w), indexing="ij")
    j = m * cfg.stride + t * cfg.dilation - cfg.pad
    keep = (j >= 0) & (j < cfg.d_x)
    w = np.asarray(cfg.weights)[t]
    return _with_corner(m[keep], j[keep], w[keep], (cfg.out_len + 1, cfg.d_x + 1))


def avgpool_matrix(d_x: int, d_w: int, pad: int = 0, stride: int = 1) -> SparseOperator:
    return conv_matrix(ConvConfig(d_x, (1.0 / d_w,) * d_w, pad, 1, stride))


def dropout_matrix(
    d_x: int,
    rate: float,
    mask=None,
    rng: np.random.Generator | None = None,
) -> SparseOperator:
    """Diagonal keep-mask; the homogeneous entry is always kept.

    Without an explicit ``mask`` one is sampled with keep-probability
    ``1 - rate`` (no rescaling of kept entries).
    """
    if not 0.0 <= rate < 1.0:
        raise LoweringError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        rng = rng if rng is not None else np.random.default_rng()
        mask = (rng.random(d_x) > rate).astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64).ravel()
    if mask.size != d_x:
        raise LoweringError(f"mask length {mask.size} does not match d_x={d_x}")
    return SparseOperator.diagonal(np.append(mask, 1.0))


def flatten_matrix(
    shape: ShapeSpec,
    order: str = "channel-major",
    target_order: str = "channel-major",
) -> SparseOperator:
    """Permutation from ``order`` storage to a flat vector in ``target_order``."""
    idx = np.arange(shape.size).reshape(shape.storage_dims(order))
    if order == "channel-last":
        idx = np.moveaxis(idx, -1, 0)
    if target_order == "channel-last":
        idx = np.moveaxis(idx, 0, -1)
    src = idx.ravel()
    n = shape.size
    return _with_corner(np.arange(n), src, np.ones(n), (n + 1, n + 1))


def probe_extract_U(
    op: Callable[[FeatureVolume], FeatureVolume],
    in_shape: ShapeSpec,
    order: str = "channel-major",
    chunk: int = 1024,
) -> SparseOperator:
    """Matrix of a linear operator, read column by column from basis responses."""
    d_in = in_shape.size
    zero = op(FeatureVolume.from_flat(np.zeros((1, d_in)), in_shape, order)).flat()
    if np.any(zero != 0.0):
        raise LoweringError("operator is not linear: nonzero response to the zero input")
    d_out = zero.shape[1]

    rows, cols, vals = [], [], []
    for start in range(0, d_in, chunk):
        stop = min(start + chunk, d_in)
        basis = np.zeros((stop - start, d_in))
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        resp = op(FeatureVolume.from_flat(basis, in_shape, order)).flat()
        if resp.shape != (stop - start, d_out):
            raise LoweringError(f"non-uniform operator: response shape {resp.shape[1:]} vs ({d_out},)")
        probe, out = np.nonzero(resp)
        rows.append(out)
        cols.append(probe + start)
        vals.append(resp[probe, out])
    rows.append([d_out])
    cols.append([d_in])
    vals.append([1.0])
    return SparseOperator.from_triples(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (d_out + 1, d_in + 1)
    )


def lower_layer(layer: LayerSpec, in_shape: ShapeSpec, order: str = "channel-major", method: str = "auto") -> SparseOperator:
    """Homogeneous matrix ``U`` of one linear layer at inference time.

    ``method`` is ``"auto"`` (closed form where one exists, probing
    otherwise), ``"formula"`` (fail when no closed form exists) or
    ``"probe"``.  Dropout without an explicit mask lowers to the identity.
    """
    if not layer.is_linear:
        raise LoweringError(f"{layer.kind} is not a linear layer")
    if method not in ("auto", "formula", "probe"):
        raise LoweringError(f"unknown lowering method {method!r}")
    if method != "probe":
        U = _closed_form(layer, in_shape, order)
        if U is not None:
            return U
        if method == "formula":
            raise LoweringError(f"no closed form for {layer.kind} on {in_shape}")

    def op(v: FeatureVolume) -> FeatureVolume:
        return apply_linear_layer(v, layer)

    try:
        return probe_extract_U(op, in_shape, order)
    except NetworkSpecError as exc:
        raise LoweringError(str(exc)) from None


def _closed_form(layer: LayerSpec, shape: ShapeSpec, order: str) -> SparseOperator | None:
    n = shape.size
    if layer.kind == "dropout":
        if layer.mask is None:
            return SparseOperator.identity(n + 1)
        return dropout_matrix(n, layer.rate, layer.mask)
    if layer.kind == "flatten":
        return flatten_matrix(shape, order, layer.target_order)
    single = len(shape.spatial) == 1 and shape.channels == 1
    if layer.kind == "conv1d" and single and layer.weights.shape[:2] == (1, 1):
        return conv_matrix(
            ConvConfig(n, tuple(layer.weights.ravel()), layer.pad[0], layer.dilation[0], layer.stride[0])
        )
    if layer.kind == "avgpool1d" and single:
        return avgpool_matrix(n, layer.kernel[0], layer.pad[0], layer.stride[0])
    return None
