"""Dense reference execution: direct-summation convolution used as ground truth.

Activations are ``float64`` arrays of shape ``(side, side, channels)`` indexed
``(row, col, channel)``. Each output element is accumulated in a fixed order
(kernel row, kernel column, input channel, all ascending) starting from zero;
the bias is added last, then the activation.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FormatError, NeuromapError
from .netir import Activation, LayerKind, ShapedLayer, ShapedNetwork


@dataclass(frozen=True)
class LayerWeights:
    """Filter bank and per-output-channel bias of one layer.

    Kernel layouts, all indexed (kernel row, kernel col, input channel, output channel):

    * standard, pointwise, fully connected: ``K x K x M x N``
    * depthwise: ``K x K x M x D``; output channel ``m*D + d`` reads input ``m``
    * grouped: ``K x K x (M/G) x N``; output ``n`` belongs to group ``n // (N/G)``
      and its input index is local to that group
    * global average pooling: ``K x K x M x 1`` filled with ``1/K^2``
    """

    kernel: np.ndarray
    bias: np.ndarray


WeightSet = list  # list[LayerWeights], one entry per layer


def kernel_shape(layer) -> tuple[int, int, int, int]:
    k, m, n = layer.kernel, layer.in_channels, layer.out_channels
    kind = layer.kind
    if kind is LayerKind.DEPTHWISE:
        return (k, k, m, layer.depth_multiplier)
    if kind is LayerKind.GROUPED:
        return (k, k, m // layer.groups, n)
    if kind is LayerKind.GLOBAL_AVG_POOL:
        return (k, k, m, 1)
    return (k, k, m, n)


def check_weights(layer, w: LayerWeights):
    shape = kernel_shape(layer)
    if w.kernel.shape != shape:
        raise DimensionMismatch(f"layer {layer.index}: kernel shape {w.kernel.shape}, expected {shape}")
    if w.bias.shape != (layer.out_channels,):
        raise DimensionMismatch(f"layer {layer.index}: bias shape {w.bias.shape}, expected ({layer.out_channels},)")
    if not (np.all(np.isfinite(w.kernel)) and np.all(np.isfinite(w.bias))):
        raise DimensionMismatch(f"layer {layer.index}: non-finite weights")


def pooling_weights(layer) -> LayerWeights:
    k = layer.kernel
    return LayerWeights(np.full(kernel_shape(layer), 1.0 / (k * k)), np.zeros(layer.out_channels))


def random_weights(net: ShapedNetwork, seed=0, low=-0.5, high=0.5, bias=True) -> WeightSet:
    """Seeded uniform weights for lowering checks; pooling layers get their fixed averaging weights."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer in net:
        if layer.kind is LayerKind.GLOBAL_AVG_POOL:
            weights.append(pooling_weights(layer))
            continue
        kernel = rng.uniform(low, high, size=kernel_shape(layer))
        b = rng.uniform(low, high, size=layer.out_channels) if bias else np.zeros(layer.out_channels)
        weights.append(LayerWeights(kernel, b))
    return weights


def random_input(net: ShapedNetwork, rng) -> np.ndarray:
    shape = net.input
    return rng.uniform(0.0, 1.0, size=(shape.side, shape.side, shape.channels))


def fold_affine(layer, w: LayerWeights, scale, shift) -> LayerWeights:
    """Fold a per-output-channel ``y -> scale*y + shift`` (e.g. inference batch norm) into the weights."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    n = layer.out_channels
    if scale.shape != (n,) or shift.shape != (n,):
        raise DimensionMismatch(f"affine parameters must have shape ({n},)")
    per_column = scale.reshape(w.kernel.shape[2:]) if layer.kind is LayerKind.DEPTHWISE else scale
    return LayerWeights(w.kernel * per_column, w.bias * scale + shift)


def apply_activation(y, activation):
    if activation is Activation.RELU:
        return np.maximum(y, 0.0)
    return y


def _padded(x, p):
    if p == 0:
        return x
    return np.pad(x, ((p, p), (p, p), (0, 0)))


def run_layer(layer: ShapedLayer, w: LayerWeights, x: np.ndarray) -> np.ndarray:
    """Exact dense convolution of one layer (zero padding, bias, activation)."""
    shape_in = layer.input
    if x.shape != (shape_in.side, shape_in.side, shape_in.channels):
        raise DimensionMismatch(f"layer {layer.index}: input shape {x.shape}, expected {shape_in}")
    check_weights(layer, w)
    k, s = layer.kernel, layer.stride
    o = layer.output.side
    xp = _padded(np.asarray(x, dtype=np.float64), layer.padding)
    span = s * (o - 1) + 1
    out = np.zeros((o, o, layer.out_channels))

    def window(kr, kc, ch):
        return xp[kr:kr + span:s, kc:kc + span:s, ch]

    kind = layer.kind
    if kind in (LayerKind.STANDARD, LayerKind.POINTWISE, LayerKind.FULLY_CONNECTED):
        for kr in range(k):
            for kc in range(k):
                for m in range(layer.in_channels):
                    out += window(kr, kc, m)[:, :, None] * w.kernel[kr, kc, m, :]
    elif kind is LayerKind.GROUPED:
        mg = layer.in_channels // layer.groups
        ng = layer.out_channels // layer.groups
        for g in range(layer.groups):
            cols = slice(g * ng, (g + 1) * ng)
            for kr in range(k):
                for kc in range(k):
                    for m in range(mg):
                        out[:, :, cols] += window(kr, kc, g * mg + m)[:, :, None] * w.kernel[kr, kc, m, cols]
    elif kind in (LayerKind.DEPTHWISE, LayerKind.GLOBAL_AVG_POOL):
        d = w.kernel.shape[3]
        for m in range(layer.in_channels):
            for kr in range(k):
                for kc in range(k):
                    out[:, :, m * d:(m + 1) * d] += window(kr, kc, m)[:, :, None] * w.kernel[kr, kc, m, :]
    else:
        raise DimensionMismatch(f"unsupported layer kind {kind}")
    out += w.bias
    return apply_activation(out, layer.activation)


class LayerExecutionError(NeuromapError):
    def __init__(self, index, cause):
        self.layer_index = index
        self.cause = cause
        super().__init__(f"layer {index}: {cause}")


def run_network(net: ShapedNetwork, weights: WeightSet, x: np.ndarray) -> list[np.ndarray]:
    """Return ``[x, out_0, out_1, ...]``; the last entry is the network output."""
    if len(weights) != len(net):
        raise DimensionMismatch(f"{len(weights)} weight entries for {len(net)} layers")
    trace = [np.asarray(x, dtype=np.float64)]
    for layer, w in zip(net, weights):
        try:
            trace.append(run_layer(layer, w, trace[-1]))
        except DimensionMismatch as exc:
            raise LayerExecutionError(layer.index, exc) from exc
    return trace


# -- serialization ---------------------------------------------------------

WEIGHT_MANIFEST = "weights.json"


def save_weights(net: ShapedNetwork, weights: WeightSet, directory) -> str:
    """Write one little-endian float64 file per layer (kernel, then bias) plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for layer, w in zip(net, weights):
        check_weights(layer, w)
        fname = f"layer{layer.index:03d}.f64"
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(w.kernel, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(w.bias, dtype="<f8").tobytes())
        entries.append({"layer": layer.index, "file": fname, "kernel": list(w.kernel.shape), "bias": int(w.bias.shape[0])})
    path = os.path.join(directory, WEIGHT_MANIFEST)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format": "float64-le", "layers": entries}, fh, indent=2)
        fh.write("\n")
    return path


def load_weights(net: ShapedNetwork, directory) -> WeightSet:
    path = os.path.join(directory, WEIGHT_MANIFEST)
    with open(path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    entries = manifest.get("layers")
    if manifest.get("format") != "float64-le" or not isinstance(entries, list) or len(entries) != len(net):
        raise FormatError(f"{path}: manifest does not describe {len(net)} float64 layers")
    weights = []
    for layer, entry in zip(net, entries):
        kshape = tuple(entry["kernel"])
        if kshape != kernel_shape(layer) or entry["bias"] != layer.out_channels:
            raise FormatError(f"{path}: layer {layer.index} dimensions do not match the network")
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype="<f8")
        nk = int(np.prod(kshape))
        if raw.size != nk + layer.out_channels:
            raise FormatError(f"{entry['file']}: expected {nk + layer.out_channels} values, found {raw.size}")
        weights.append(LayerWeights(raw[:nk].reshape(kshape).astype(np.float64), raw[nk:].astype(np.float64)))
    return weights
