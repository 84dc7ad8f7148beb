"""Network intermediate representation: layer specs, shape inference, MAC costs, presets.

Spatial tensors are square. A layer maps an ``I x I x M`` input volume to an
``O x O x N`` output volume with ``O = (I - K + 2P) // S + 1``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    DegenerateOutput,
    FormatError,
    InvalidLayer,
    ShapeMismatch,
    UnknownPreset,
)


class LayerKind(str, Enum):
    STANDARD = "Standard"
    POINTWISE = "Pointwise"
    DEPTHWISE = "Depthwise"
    GROUPED = "Grouped"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    FULLY_CONNECTED = "FullyConnected"


class Activation(str, Enum):
    RELU = "ReLU"
    NONE = "None"


@dataclass(frozen=True)
class TensorShape:
    side: int
    channels: int

    def __post_init__(self):
        if self.side < 1 or self.channels < 1:
            raise InvalidLayer(f"tensor shape must be positive, got {self}")

    def __str__(self):
        return f"{self.side}x{self.side}x{self.channels}"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    ``depth_multiplier`` is only meaningful for depthwise layers and ``groups``
    only for grouped layers; both stay 1 elsewhere. Global average pooling and
    fully connected layers cover the whole input, so their ``kernel`` must equal
    the input side (checked during shape inference).
    """

    kind: LayerKind
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1
    depth_multiplier: int = 1
    groups: int = 1
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "activation", Activation(self.activation))
        k, s, p = self.kernel, self.stride, self.padding
        m, n = self.in_channels, self.out_channels
        if k < 1 or s < 1 or p < 0 or m < 1 or n < 1:
            raise InvalidLayer(f"K, S, M, N must be >= 1 and P >= 0: {self}")
        if self.depth_multiplier < 1 or self.groups < 1:
            raise InvalidLayer(f"D and G must be >= 1: {self}")
        kind = self.kind
        if kind is LayerKind.POINTWISE and (k, s, p) != (1, 1, 0):
            raise InvalidLayer("pointwise layers require K=1, S=1, P=0")
        if kind is LayerKind.DEPTHWISE and n != m * self.depth_multiplier:
            raise InvalidLayer(f"depthwise requires N = M*D, got N={n}, M={m}, D={self.depth_multiplier}")
        if kind is LayerKind.GROUPED and (m % self.groups or n % self.groups):
            raise InvalidLayer(f"G={self.groups} must divide M={m} and N={n}")
        if kind is LayerKind.GLOBAL_AVG_POOL and (n != m or s != k or p != 0):
            raise InvalidLayer("global average pooling requires N = M, S = K, P = 0")
        if kind is LayerKind.FULLY_CONNECTED and (s != k or p != 0):
            raise InvalidLayer("fully connected layers require S = K, P = 0")
        if kind is not LayerKind.DEPTHWISE and self.depth_multiplier != 1:
            raise InvalidLayer("depth multiplier is only valid on depthwise layers")
        if kind is not LayerKind.GROUPED and self.groups != 1:
            raise InvalidLayer("group count is only valid on grouped layers")

    @property
    def group_count(self) -> int:
        """Number of independent channel groups once every kind is viewed as grouped."""
        if self.kind is LayerKind.GROUPED:
            return self.groups
        if self.kind in (LayerKind.DEPTHWISE, LayerKind.GLOBAL_AVG_POOL):
            return self.in_channels
        return 1

    @property
    def inputs_per_output(self) -> int:
        """Input channels read by a single output channel."""
        return self.in_channels // self.group_count

    @property
    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.inputs_per_output


@dataclass(frozen=True)
class NetworkSpec:
    input: TensorShape
    layers: tuple[LayerSpec, ...] = ()
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class ShapedLayer:
    index: int
    spec: LayerSpec
    input: TensorShape
    output: TensorShape

    def __getattr__(self, name):
        # Convenience passthrough, so callers can write ``layer.kernel``.
        if name.startswith("__") or name == "spec":
            raise AttributeError(name)
        return getattr(self.spec, name)


@dataclass(frozen=True)
class ShapedNetwork:
    spec: NetworkSpec
    layers: tuple[ShapedLayer, ...]

    @property
    def name(self):
        return self.spec.name

    @property
    def input(self) -> TensorShape:
        return self.spec.input

    @property
    def output(self) -> TensorShape:
        return self.layers[-1].output if self.layers else self.spec.input

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def output_side(side, kernel, stride, padding):
    return (side - kernel + 2 * padding) // stride + 1


def infer_shapes(net: NetworkSpec) -> ShapedNetwork:
    """Annotate every layer with its input and output shape.

    Raises :class:`ShapeMismatch` when channel counts do not chain and
    :class:`DegenerateOutput` when a layer would produce an empty output.
    Nothing is returned unless the whole network checks out.
    """
    shaped = []
    cur = net.input
    for i, layer in enumerate(net.layers):
        if layer.in_channels != cur.channels:
            raise ShapeMismatch(
                f"layer {i} ({layer.kind.value}) expects {layer.in_channels} input channels, "
                f"previous output has {cur.channels}"
            )
        if layer.kind in (LayerKind.GLOBAL_AVG_POOL, LayerKind.FULLY_CONNECTED) and layer.kernel != cur.side:
            raise ShapeMismatch(
                f"layer {i} ({layer.kind.value}) must cover the whole {cur.side}x{cur.side} input, K={layer.kernel}"
            )
        numer = cur.side - layer.kernel + 2 * layer.padding
        if numer < 0:
            raise DegenerateOutput(f"layer {i}: kernel {layer.kernel} larger than padded input {cur.side}")
        out = TensorShape(output_side(cur.side, layer.kernel, layer.stride, layer.padding), layer.out_channels)
        shaped.append(ShapedLayer(i, layer, cur, out))
        cur = out
    return ShapedNetwork(net, tuple(shaped))


def mac_cost(layer: ShapedLayer) -> int:
    """Multiply-accumulate count of one shaped layer.

    Padded window positions are counted, matching the closed-form costs
    ``O^2 K^2 M N`` (standard), ``O^2 M N`` (pointwise) and ``O^2 K^2 M D``
    (depthwise). Grouped layers sum the standard cost over their groups.
    """
    o = layer.output.side
    k = layer.kernel
    m, n = layer.in_channels, layer.out_channels
    kind = layer.kind
    if kind in (LayerKind.STANDARD, LayerKind.FULLY_CONNECTED):
        return o * o * k * k * m * n
    if kind is LayerKind.POINTWISE:
        return o * o * m * n
    if kind is LayerKind.DEPTHWISE:
        return o * o * k * k * m * layer.depth_multiplier
    if kind is LayerKind.GROUPED:
        g = layer.groups
        return g * (o * o * k * k * (m // g) * (n // g))
    if kind is LayerKind.GLOBAL_AVG_POOL:
        return o * o * k * k * m
    raise InvalidLayer(f"unknown layer kind {kind}")


@dataclass(frozen=True)
class ComplexityReport:
    per_layer: tuple[int, ...]
    total: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", sum(self.per_layer))


def complexity(net: ShapedNetwork) -> ComplexityReport:
    return ComplexityReport(tuple(mac_cost(layer) for layer in net))


# -- presets ---------------------------------------------------------------

PRESET_NAMES = ("table1-256", "table1-512", "table1-1024")

# Output channels of the three leading convolutions, then of each
# depthwise/pointwise pair's pointwise half. Nine pairs follow the convolutions.
_PRESET_CHANNELS = {
    "table1-256": ((16, 28, 64), (256, 256, 256, 256, 256, 256, 256, 1000, 1000)),
    "table1-512": ((32, 56, 256), (256, 512, 512, 512, 512, 512, 512, 1000, 1000)),
    "table1-1024": ((32, 64, 256), (256, 512, 512, 512, 512, 512, 512, 1000, 1000)),
}
# Depthwise stride of each pair: the table halves the spatial side at pairs 2 and 8.
_PAIR_STRIDES = (1, 2, 1, 1, 1, 1, 1, 2, 1)


def preset(name: str) -> NetworkSpec:
    """Hardware-friendly architecture for one core size: 3 convs, 9 depthwise/pointwise pairs, global pool."""
    try:
        convs, pointwise = _PRESET_CHANNELS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None
    layers = []
    ch = 3
    for n in convs:
        layers.append(LayerSpec(LayerKind.STANDARD, kernel=3, stride=2, padding=1, in_channels=ch, out_channels=n))
        ch = n
    for stride, n in zip(_PAIR_STRIDES, pointwise):
        layers.append(LayerSpec(LayerKind.DEPTHWISE, kernel=3, stride=stride, padding=1, in_channels=ch, out_channels=ch))
        layers.append(LayerSpec(LayerKind.POINTWISE, in_channels=ch, out_channels=n))
        ch = n
    layers.append(
        LayerSpec(
            LayerKind.GLOBAL_AVG_POOL, kernel=7, stride=7, in_channels=ch, out_channels=ch,
            activation=Activation.NONE,
        )
    )
    return NetworkSpec(TensorShape(224, 3), tuple(layers), name=name)


# -- JSON ------------------------------------------------------------------

_LAYER_KEYS = ("kind", "K", "S", "P", "M", "N", "D", "G", "activation")
_REQUIRED_LAYER_KEYS = ("kind", "K", "S", "P", "M", "N", "activation")
_ATTR = {
    "K": "kernel", "S": "stride", "P": "padding", "M": "in_channels", "N": "out_channels",
    "D": "depth_multiplier", "G": "groups",
}


def network_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for layer in net.layers:
        d = {"kind": layer.kind.value}
        for key in ("K", "S", "P", "M", "N", "D", "G"):
            d[key] = getattr(layer, _ATTR[key])
        d["activation"] = layer.activation.value
        layers.append(d)
    return {
        "name": net.name,
        "input": {"side": net.input.side, "channels": net.input.channels},
        "layers": layers,
    }


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise FormatError(f"{where}: missing field(s) {missing}")


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"{where}: expected an integer, got {value!r}")
    return value


def network_from_dict(doc) -> NetworkSpec:
    _check_keys(doc, ("name", "input", "layers"), ("name", "input", "layers"), "network")
    _check_keys(doc["input"], ("side", "channels"), ("side", "channels"), "input")
    if not isinstance(doc["layers"], list):
        raise FormatError("layers: expected a list")
    layers = []
    for i, d in enumerate(doc["layers"]):
        where = f"layers[{i}]"
        _check_keys(d, _LAYER_KEYS, _REQUIRED_LAYER_KEYS, where)
        kwargs = {_ATTR[k]: _int(d[k], f"{where}.{k}") for k in _ATTR if k in d}
        try:
            layers.append(LayerSpec(LayerKind(d["kind"]), activation=Activation(d["activation"]), **kwargs))
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from exc
    try:
        shape = TensorShape(_int(doc["input"]["side"], "input.side"), _int(doc["input"]["channels"], "input.channels"))
    except InvalidLayer as exc:
        raise FormatError(str(exc)) from exc
    if not isinstance(doc["name"], str):
        raise FormatError("name: expected a string")
    return NetworkSpec(shape, tuple(layers), name=doc["name"])


def dumps_network(net: NetworkSpec) -> str:
    return json.dumps(network_to_dict(net), indent=2, sort_keys=False) + "\n"


def loads_network(text: str) -> NetworkSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from exc
    return network_from_dict(doc)


def load_network(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return loads_network(fh.read())


def network_hash(net: NetworkSpec) -> str:
    canonical = json.dumps(network_to_dict(net), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
