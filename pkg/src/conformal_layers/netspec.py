"""Declarative network descriptions and their JSON file format.

A network file looks like::

    {
      "input": [3, 8, 8],
      "order": "channel-major",
      "encoding": "norm",
      "layers": [
        {"kind": "conv2d", "weights": [...], "pad": 1},
        {"kind": "respro"},
        {"kind": "avgpool2d", "kernel": 2, "stride": 2},
        {"kind": "flatten"}
      ]
    }

``input`` lists the storage dimensions including the channel axis
(``[C, *spatial]`` for ``channel-major``, ``[*spatial, C]`` for
``channel-last``); a single number means a single-channel 1-D signal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "ORDERS",
    "LAYER_KINDS",
    "LINEAR_KINDS",
    "NetworkSpecError",
    "ShapeSpec",
    "LayerSpec",
    "NetworkSpec",
    "conv_output_length",
    "load_network",
    "save_network",
    "network_from_dict",
    "network_to_dict",
    "dknet_spec",
    "d3modnet_spec",
]

ORDERS = ("channel-major", "channel-last")
LAYER_KINDS = ("conv1d", "conv2d", "avgpool1d", "avgpool2d", "dropout", "flatten", "respro")
LINEAR_KINDS = frozenset(LAYER_KINDS) - {"respro"}
ENCODINGS = ("norm", "canonical")

_SPATIAL_RANK = {"conv1d": 1, "conv2d": 2, "avgpool1d": 1, "avgpool2d": 2}


class NetworkSpecError(ValueError):
    """Invalid network description; the message names the offending field."""


@dataclass(frozen=True)
class ShapeSpec:
    """Feature-volume shape: spatial extents plus a channel count."""

    spatial: tuple[int, ...]
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if not self.spatial or any(s < 1 for s in self.spatial) or self.channels < 1:
            raise NetworkSpecError(f"invalid shape {self.spatial} x {self.channels} channels")

    @property
    def size(self) -> int:
        return self.channels * math.prod(self.spatial)

    def storage_dims(self, order: str) -> tuple[int, ...]:
        if order == "channel-major":
            return (self.channels, *self.spatial)
        if order == "channel-last":
            return (*self.spatial, self.channels)
        raise NetworkSpecError(f"unknown element order {order!r}")

    @classmethod
    def from_storage_dims(cls, dims: Sequence[int], order: str) -> "ShapeSpec":
        dims = [int(d) for d in dims]
        if len(dims) == 1:
            return cls((dims[0],), 1)
        if order == "channel-major":
            return cls(tuple(dims[1:]), dims[0])
        if order == "channel-last":
            return cls(tuple(dims[:-1]), dims[-1])
        raise NetworkSpecError(f"unknown element order {order!r}")


def _per_dim(value, rank: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        value = (value,) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise NetworkSpecError(f"{name} needs {rank} entries, got {len(value)}")
    return value


def conv_output_length(length: int, kernel: int, pad: int, dilation: int, stride: int) -> int:
    """Number of valid output positions; may be <= 0 for degenerate configs."""
    span = length + 2 * pad - dilation * (kernel - 1) - 1
    if span < 0:
        return 0
    return span // stride + 1


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer.

    ``weights`` (conv only) has shape ``(C_out, C_in, *kernel)``; a flat
    vector is accepted for single-channel 1-D convolution.  ``kernel`` is the
    pooling window.  ``alpha`` optionally overrides ReSPro's estimated radius.
    ``mask`` is a dropout keep-mask over the flattened storage order.
    ``target_order`` is the element order produced by ``flatten``.
    """

    kind: str
    weights: np.ndarray | None = None
    kernel: tuple[int, ...] | None = None
    pad: tuple[int, ...] | int = 0
    dilation: tuple[int, ...] | int = 1
    stride: tuple[int, ...] | int = 1
    rate: float = 0.0
    mask: np.ndarray | None = None
    alpha: float | None = None
    target_order: str = "channel-major"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetworkSpecError(f"unsupported layer kind {self.kind!r}")
        rank = _SPATIAL_RANK.get(self.kind)
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64)
            if rank == 1 and w.ndim == 1:
                w = w.reshape(1, 1, -1)
            if not np.all(np.isfinite(w)):
                raise NetworkSpecError("weights: non-finite weight")
            w.flags.writeable = False
            object.__setattr__(self, "weights", w)
        if self.kind in ("conv1d", "conv2d"):
            if self.weights is None or self.weights.ndim != rank + 2 or 0 in self.weights.shape:
                raise NetworkSpecError(f"weights: {self.kind} needs an array of rank {rank + 2}")
        if self.kind in ("avgpool1d", "avgpool2d"):
            if self.kernel is None:
                raise NetworkSpecError("kernel: pooling window is required")
            object.__setattr__(self, "kernel", _per_dim(self.kernel, rank, "kernel"))
            if min(self.kernel) < 1:
                raise NetworkSpecError("kernel: window sizes must be >= 1")
        if rank is not None:
            for name, low in (("pad", 0), ("dilation", 1), ("stride", 1)):
                vals = _per_dim(getattr(self, name), rank, name)
                if min(vals) < low:
                    raise NetworkSpecError(f"{name}: values must be >= {low}")
                object.__setattr__(self, name, vals)
            if self.kind.startswith("avgpool") and self.dilation != (1,) * rank:
                raise NetworkSpecError("dilation: average pooling does not dilate")
        if self.kind == "dropout":
            if not 0.0 <= self.rate < 1.0:
                raise NetworkSpecError("rate: dropout rate must be in [0, 1)")
            if self.mask is not None:
                m = np.array(self.mask, dtype=np.float64).ravel()
                if not np.all((m == 0) | (m == 1)):
                    raise NetworkSpecError("mask: entries must be 0 or 1")
                m.flags.writeable = False
                object.__setattr__(self, "mask", m)
        if self.kind == "respro" and self.alpha is not None:
            if not (math.isfinite(self.alpha) and self.alpha > 0):
                raise NetworkSpecError("alpha: must be a positive finite number")
        if self.kind == "flatten" and self.target_order not in ORDERS:
            raise NetworkSpecError(f"target_order: unknown element order {self.target_order!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def spatial_rank(self) -> int | None:
        return _SPATIAL_RANK.get(self.kind)

    def window(self) -> tuple[int, ...]:
        if self.kind.startswith("conv"):
            return tuple(self.weights.shape[2:])
        return self.kernel

    def output_shape(self, shape: ShapeSpec) -> ShapeSpec:
        """Shape produced from ``shape``; raises on a broken chain."""
        if self.kind in ("respro", "dropout"):
            if self.kind == "dropout" and self.mask is not None and self.mask.size != shape.size:
                raise NetworkSpecError(f"mask: length {self.mask.size} does not match {shape.size} elements")
            return shape
        if self.kind == "flatten":
            return ShapeSpec((shape.size,), 1)
        rank = self.spatial_rank
        if len(shape.spatial) != rank:
            raise NetworkSpecError(f"{self.kind} expects {rank} spatial dims, got {len(shape.spatial)}")
        channels = shape.channels
        if self.kind.startswith("conv"):
            if self.weights.shape[1] != shape.channels:
                raise NetworkSpecError(
                    f"weights: expects {self.weights.shape[1]} input channels, got {shape.channels}"
                )
            channels = self.weights.shape[0]
        out = tuple(
            conv_output_length(n, k, p, d, s)
            for n, k, p, d, s in zip(shape.spatial, self.window(), self.pad, self.dilation, self.stride)
        )
        if min(out) < 1:
            raise NetworkSpecError(f"{self.kind} produces an empty output from spatial {shape.spatial}")
        return ShapeSpec(out, channels)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    input: ShapeSpec
    layers: tuple[LayerSpec, ...] = ()
    order: str = "channel-major"
    encoding: str = "norm"
    shapes: tuple[ShapeSpec, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order not in ORDERS:
            raise NetworkSpecError(f"order: unknown element order {self.order!r}")
        if self.encoding not in ENCODINGS:
            raise NetworkSpecError(f"encoding: unknown encoding {self.encoding!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except NetworkSpecError as exc:
                raise NetworkSpecError(f"layers[{i}] ({layer.kind}): {exc}") from None
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output(self) -> ShapeSpec:
        return self.shapes[-1]

    @property
    def d_in(self) -> int:
        return self.input.size

    @property
    def d_out(self) -> int:
        return self.output.size

    def replace_layer(self, index: int, **changes) -> "NetworkSpec":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return replace(self, layers=tuple(layers))


def _layer_from_dict(d: dict[str, Any], index: int) -> LayerSpec:
    if not isinstance(d, dict) or "kind" not in d:
        raise NetworkSpecError(f"layers[{index}]: each layer needs a 'kind' field")
    kind = d["kind"]
    if kind not in LAYER_KINDS:
        raise NetworkSpecError(f"layers[{index}].kind: unsupported layer kind {kind!r}")
    known = {"kind", "weights", "kernel", "pad", "dilation", "stride", "rate", "mask", "alpha", "order"}
    unknown = set(d) - known
    if unknown:
        raise NetworkSpecError(f"layers[{index}]: unknown field(s) {sorted(unknown)}")
    kwargs = {k: v for k, v in d.items() if k not in ("kind", "order")}
    if "order" in d:
        kwargs["target_order"] = d["order"]
    try:
        if "weights" in kwargs:
            w = np.array(kwargs["weights"], dtype=np.float64)
            if not np.all(np.isfinite(w)):
                raise NetworkSpecError("weights: non-finite weight")
        return LayerSpec(kind=kind, **kwargs)
    except NetworkSpecError as exc:
        raise NetworkSpecError(f"layers[{index}].{exc}") from None
    except (TypeError, ValueError) as exc:
        raise NetworkSpecError(f"layers[{index}]: {exc}") from None


def network_from_dict(doc: dict[str, Any]) -> NetworkSpec:
    if "input" not in doc:
        raise NetworkSpecError("input: missing input shape")
    order = doc.get("order", "channel-major")
    dims = doc["input"]
    if isinstance(dims, int):
        dims = [dims]
    shape = ShapeSpec.from_storage_dims(dims, order)
    layers = [_layer_from_dict(layer, i) for i, layer in enumerate(doc.get("layers", []))]
    return NetworkSpec(shape, tuple(layers), order=order, encoding=doc.get("encoding", "norm"))


def _listify(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value


def network_to_dict(net: NetworkSpec) -> dict[str, Any]:
    layers = []
    for layer in net.layers:
        d: dict[str, Any] = {"kind": layer.kind}
        if layer.kind.startswith("conv"):
            d["weights"] = layer.weights.tolist()
        if layer.kind.startswith("avgpool"):
            d["kernel"] = list(layer.kernel)
        if layer.spatial_rank:
            d.update(pad=list(layer.pad), stride=list(layer.stride))
            if layer.kind.startswith("conv"):
                d["dilation"] = list(layer.dilation)
        if layer.kind == "dropout":
            d["rate"] = layer.rate
            if layer.mask is not None:
                d["mask"] = layer.mask.tolist()
        if layer.kind == "respro" and layer.alpha is not None:
            d["alpha"] = layer.alpha
        if layer.kind == "flatten":
            d["order"] = layer.target_order
        layers.append({k: _listify(v) for k, v in d.items()})
    return {
        "input": list(net.input.storage_dims(net.order)),
        "order": net.order,
        "encoding": net.encoding,
        "layers": layers,
    }


def load_network(path: str | Path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkSpecError(f"{path}: not valid JSON ({exc})") from None
    return network_from_dict(doc)


def save_network(net: NetworkSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
        fh.write("\n")


def _uniform_weights(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def dknet_spec(
    k: int,
    *,
    size: int = 3,
    in_channels: int = 3,
    channels: int = 8,
    seed: int = 0,
) -> NetworkSpec:
    """Depth-``k`` stack of 3x3 conv (pad 1, stride 1) + ReSPro.

    A scaled-down analogue of the depth-sweep network; ``size`` is the
    square input extent.
    """
    if k < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    c_in = in_channels
    for _ in range(k):
        layers.append(LayerSpec("conv2d", weights=_uniform_weights(rng, (channels, c_in, 3, 3)), pad=1))
        layers.append(LayerSpec("respro"))
        c_in = channels
    return NetworkSpec(ShapeSpec((size, size), in_channels), tuple(layers))


def d3modnet_spec(
    *,
    stages: int = 3,
    size: int = 16,
    in_channels: int = 3,
    channels: int = 8,
    seed: int = 0,
) -> NetworkSpec:
    """``stages`` x (3x3 conv, ReSPro, 2x2 average pooling), no padding."""
    rng = np.random.default_rng(seed)
    layers = []
    c_in = in_channels
    for _ in range(stages):
        layers.append(LayerSpec("conv2d", weights=_uniform_weights(rng, (channels, c_in, 3, 3))))
        layers.append(LayerSpec("respro"))
        layers.append(LayerSpec("avgpool2d", kernel=2))
        c_in = channels
    return NetworkSpec(ShapeSpec((size, size), in_channels), tuple(layers))
