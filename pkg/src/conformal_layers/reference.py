"""Direct, dense operators used as the sequential oracle and as probe targets.

Every operator takes a leading batch axis so a whole identity basis can be
pushed through in one call.  Clarity beats speed here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .homogeneous import EPS, AllocationCounter
from .netspec import LayerSpec, NetworkSpec, NetworkSpecError, ShapeSpec, conv_output_length

__all__ = [
    "FeatureVolume",
    "direct_conv",
    "direct_avgpool",
    "direct_dropout",
    "direct_flatten",
    "apply_linear_layer",
    "sequential_forward",
]


@dataclass(frozen=True)
class FeatureVolume:
    """A batch of feature maps stored as ``(n, *storage_dims)``."""

    shape: ShapeSpec
    values: np.ndarray
    order: str = "channel-major"

    def __post_init__(self):
        v = np.asarray(self.values)
        expected = self.shape.storage_dims(self.order)
        if v.shape[1:] != expected:
            raise ValueError(f"values of shape {v.shape[1:]} do not match {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature volume has non-finite entries")

    @classmethod
    def from_flat(cls, flat, shape: ShapeSpec, order: str = "channel-major") -> "FeatureVolume":
        flat = np.atleast_2d(np.asarray(flat, dtype=np.float64))
        if flat.shape[1] != shape.size:
            raise ValueError(f"expected {shape.size} values per sample, got {flat.shape[1]}")
        return cls(shape, flat.reshape(flat.shape[0], *shape.storage_dims(order)), order)

    @classmethod
    def from_channel_major(cls, arr: np.ndarray, order: str) -> "FeatureVolume":
        shape = ShapeSpec(arr.shape[2:], arr.shape[1])
        if order == "channel-last":
            arr = np.moveaxis(arr, 1, -1)
        return cls(shape, np.ascontiguousarray(arr), order)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def flat(self) -> np.ndarray:
        return self.values.reshape(self.n, -1)

    def channel_major(self) -> np.ndarray:
        if self.order == "channel-last":
            return np.moveaxis(self.values, -1, 1)
        return self.values


def _check_window(shape: ShapeSpec, window, pad, dilation, stride) -> tuple[int, ...]:
    if len(window) != len(shape.spatial):
        raise NetworkSpecError(f"window rank {len(window)} does not match spatial rank {len(shape.spatial)}")
    out = tuple(conv_output_length(*args) for args in zip(shape.spatial, window, pad, dilation, stride))
    if min(out) < 1:
        raise NetworkSpecError(f"empty output for input {shape.spatial} and window {tuple(window)}")
    return out


def _as_tuple(v, rank):
    return (int(v),) * rank if np.isscalar(v) else tuple(int(a) for a in v)


def direct_conv(v: FeatureVolume, weights, pad=0, dilation=1, stride=1) -> FeatureVolume:
    """Zero-padded, dilated, strided valid cross-correlation without bias."""
    w = np.asarray(weights, dtype=np.float64)
    rank = len(v.shape.spatial)
    if w.ndim == 1 and rank == 1:
        w = w.reshape(1, 1, -1)
    if w.ndim != rank + 2 or w.shape[1] != v.shape.channels:
        raise NetworkSpecError(f"kernel of shape {w.shape} does not fit {v.shape}")
    pad, dilation, stride = (_as_tuple(a, rank) for a in (pad, dilation, stride))
    out_len = _check_window(v.shape, w.shape[2:], pad, dilation, stride)

    x = np.pad(v.channel_major(), [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out = np.zeros((v.n, w.shape[0], *out_len))
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        window = tuple(
            slice(o * d, o * d + s * (m - 1) + 1, s) for o, d, s, m in zip(offset, dilation, stride, out_len)
        )
        patch = x[(slice(None), slice(None)) + window]
        tap = w[(slice(None), slice(None)) + offset]
        out += np.einsum("oc,nc...->no...", tap, patch)
    return FeatureVolume.from_channel_major(out, v.order)


def direct_avgpool(v: FeatureVolume, kernel, pad=0, stride=1) -> FeatureVolume:
    """Per-channel mean filter; padded zeros count toward the window size."""
    rank = len(v.shape.spatial)
    kernel, pad, stride = (_as_tuple(a, rank) for a in (kernel, pad, stride))
    out_len = _check_window(v.shape, kernel, pad, (1,) * rank, stride)

    x = np.pad(v.channel_major(), [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out = np.zeros((v.n, v.shape.channels, *out_len))
    for offset in itertools.product(*(range(k) for k in kernel)):
        window = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_len))
        out += x[(slice(None), slice(None)) + window]
    out /= float(np.prod(kernel))
    return FeatureVolume.from_channel_major(out, v.order)


def direct_dropout(
    v: FeatureVolume,
    rate: float = 0.0,
    mask=None,
    rng: np.random.Generator | None = None,
) -> FeatureVolume:
    """Unscaled elementwise mask.

    An explicit ``mask`` wins; otherwise a mask is sampled when ``rng`` is
    given (reference/training semantics) and dropout is the identity when it
    is not (inference semantics).
    """
    if mask is None and rng is not None and rate > 0.0:
        mask = (rng.random(v.shape.size) > rate).astype(np.float64)
    if mask is None:
        return FeatureVolume(v.shape, v.values.copy(), v.order)
    mask = np.asarray(mask, dtype=np.float64).ravel()
    if mask.size != v.shape.size:
        raise ValueError(f"mask length {mask.size} does not match {v.shape.size} elements")
    return FeatureVolume.from_flat(v.flat() * mask, v.shape, v.order)


def direct_flatten(v: FeatureVolume, target_order: str = "channel-major") -> FeatureVolume:
    """Re-linearise into a single-channel 1-D signal in ``target_order``."""
    a = v.channel_major()
    if target_order == "channel-last":
        a = np.moveaxis(a, 1, -1)
    return FeatureVolume.from_flat(a.reshape(v.n, -1), ShapeSpec((v.shape.size,), 1), v.order)


def apply_linear_layer(v: FeatureVolume, layer: LayerSpec, rng: np.random.Generator | None = None) -> FeatureVolume:
    kind = layer.kind
    if kind.startswith("conv"):
        return direct_conv(v, layer.weights, layer.pad, layer.dilation, layer.stride)
    if kind.startswith("avgpool"):
        return direct_avgpool(v, layer.kernel, layer.pad, layer.stride)
    if kind == "dropout":
        return direct_dropout(v, layer.rate, layer.mask, rng)
    if kind == "flatten":
        return direct_flatten(v, layer.target_order)
    raise ValueError(f"{kind} is not a linear layer")


def sequential_forward(
    net: NetworkSpec,
    x,
    *,
    alphas: list[float | None] | None = None,
    encoding: str | None = None,
    counter: AllocationCounter | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run ``net`` layer by layer and return the decoded output.

    ``x`` is one flat input (``d_in``) or a batch (``n x d_in``).  The extra
    homogeneous coefficient is set once from ``encoding``, left untouched by
    linear layers, updated by every ReSPro and divided out at the end.  One
    intermediate buffer per layer is recorded in ``counter``.
    """
    from .respro import resolve_alphas

    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.d_in:
        raise ValueError(f"input has {x.shape[1]} values, network expects {net.d_in}")
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid input: non-finite coefficient")
    if alphas is None:
        alphas = resolve_alphas(net)
    encoding = encoding or net.encoding
    if encoding == "canonical":
        homo = np.ones(x.shape[0])
    elif encoding == "norm":
        homo = np.maximum(np.linalg.norm(x, axis=1), EPS)
    else:
        raise ValueError(f"unknown encoding mode {encoding!r}")

    v = FeatureVolume.from_flat(x, net.input, net.order)
    for layer, alpha in zip(net.layers, alphas):
        if layer.kind == "respro":
            flat = v.flat()
            homo = 0.5 * alpha * homo + np.einsum("ij,ij->i", flat, flat) / (2.0 * alpha)
            v = FeatureVolume(v.shape, v.values.copy(), v.order)
        else:
            v = apply_linear_layer(v, layer, rng)
        if counter is not None:
            counter.request(v.values.size)

    if np.any(np.abs(homo) < EPS):
        raise ZeroDivisionError("degenerate homogeneous coordinate")
    out = v.flat() / homo[:, None]
    return out[0] if single else out
