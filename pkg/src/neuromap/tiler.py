"""Axon footprints of neuron tiles and per-layer tile search under core limits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum

from .errors import FanInExceedsCore, InvalidLayer
from .netir import ShapedLayer, ShapedNetwork


class Scheme(str, Enum):
    SPLIT = "split"
    DIFFERENTIAL = "differential"


class BiasMode(str, Enum):
    NEURON = "neuron"  # bias held in the neuron's offset register
    AXON = "axon"  # one constant-one axon per core carries the bias row


@dataclass(frozen=True)
class CoreSpec:
    axons: int
    neurons: int

    def __post_init__(self):
        if self.axons < 1 or self.neurons < 1:
            raise InvalidLayer(f"core dimensions must be positive, got {self.axons}x{self.neurons}")

    @classmethod
    def parse(cls, text: str) -> "CoreSpec":
        """Parse ``"AxR"``, e.g. ``"256x256"``."""
        parts = text.lower().split("x")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ValueError(f"core spec must look like 256x256, got {text!r}")
        return cls(int(parts[0]), int(parts[1]))

    def __str__(self):
        return f"{self.axons}x{self.neurons}"


CORE_PRESETS = {256: CoreSpec(256, 256), 512: CoreSpec(512, 512), 1024: CoreSpec(1024, 1024)}


def axon_count(kernel, stride, rows, cols):
    """Input neurons feeding a ``rows x cols`` block of outputs in one feature map.

    This is K^2 + KS(c-1) + S^2(c-1)(r-1) + KS(r-1), i.e. the extent of the
    receptive-field span along each axis multiplied together. It is exact when
    the stride does not exceed the kernel; with S > K the windows leave gaps and
    the value is an upper bound.
    """
    if min(kernel, stride, rows, cols) < 1:
        raise ValueError("kernel, stride, rows and cols must be >= 1")
    k, s, r, c = kernel, stride, rows, cols
    return k * k + k * s * (c - 1) + s * s * (c - 1) * (r - 1) + k * s * (r - 1)


def usable_axons(core: CoreSpec, scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON) -> int:
    """Logical axons available to a tile once the scheme and bias are accounted for."""
    a = core.axons // 2 if Scheme(scheme) is Scheme.SPLIT else core.axons
    if BiasMode(bias_mode) is BiasMode.AXON:
        a -= 1
    return a


def physical_rows(logical_axons, scheme, bias_mode) -> int:
    rows = logical_axons + (1 if BiasMode(bias_mode) is BiasMode.AXON else 0)
    return 2 * rows if Scheme(scheme) is Scheme.SPLIT else rows


def feature_chunks(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def chunk_inputs(layer, lo, hi):
    """Input channels read by output channels ``[lo, hi)``, as a half-open range."""
    groups = layer.group_count
    out_per_group = layer.out_channels // groups
    in_per_group = layer.in_channels // groups
    g0, g1 = lo // out_per_group, (hi - 1) // out_per_group
    return g0 * in_per_group, (g1 + 1) * in_per_group


def worst_case_inputs(layer, f):
    """Most input channels any chunk of ``f`` consecutive output maps reads."""
    return max(b - a for a, b in (chunk_inputs(layer, lo, hi) for lo, hi in feature_chunks(layer.out_channels, f)))


@dataclass(frozen=True)
class TileSpec:
    rows: int
    cols: int
    features: int
    n_axons: int  # footprint per input channel (closed form)
    m_tile: int  # input channels feeding the tile

    @property
    def neurons(self):
        return self.rows * self.cols * self.features

    @property
    def axons(self):
        return self.n_axons * self.m_tile


def enumerate_tiles(layer: ShapedLayer, core: CoreSpec, scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON):
    """Yield every feasible tile of the layer (pruned only where infeasibility is certain)."""
    budget = usable_axons(core, scheme, bias_mode)
    o = layer.output.side
    n = layer.out_channels
    k, s = layer.kernel, layer.stride
    m_of = [0] + [worst_case_inputs(layer, f) for f in range(1, n + 1)]
    m_min = min(m_of[1:])
    for r in range(1, o + 1):
        if axon_count(k, s, r, 1) * m_min > budget or r > core.neurons:
            break
        for c in range(1, o + 1):
            per_channel = axon_count(k, s, r, c)
            if per_channel * m_min > budget:
                break
            f_max = min(n, core.neurons // (r * c))
            if f_max == 0:
                break
            for f in range(1, f_max + 1):
                if per_channel * m_of[f] <= budget:
                    yield TileSpec(r, c, f, per_channel, m_of[f])


def select_tile(layer: ShapedLayer, core: CoreSpec, scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON) -> TileSpec:
    """Feasible tile holding the most neurons.

    Ties go to the larger axon-fraction x neuron-fraction product, then the
    squarer tile, then the smaller per-channel footprint, then the
    lexicographically smallest (rows, cols, features).
    """
    budget = usable_axons(core, scheme, bias_mode)
    if layer.fan_in > budget:
        raise FanInExceedsCore(layer.index, layer.fan_in, budget, layer.kind.value)
    best, best_key = None, None
    for t in enumerate_tiles(layer, core, scheme, bias_mode):
        used = physical_rows(t.axons, scheme, bias_mode)
        key = (t.neurons, used * t.neurons, -abs(t.rows - t.cols), -t.n_axons, -t.rows, -t.cols, -t.features)
        if best_key is None or key > best_key:
            best, best_key = t, key
    if best is None:  # fan-in fits, so the 1x1x1 tile always does
        raise FanInExceedsCore(layer.index, layer.fan_in, budget, layer.kind.value)
    if best.axons > budget or best.neurons > core.neurons:
        raise AssertionError(f"tile search returned an infeasible tile {best}")
    return best


@dataclass(frozen=True)
class LayerUtilization:
    layer: int
    kind: str
    tile: TileSpec
    axons_used: int
    neurons_used: int
    axon_fraction: float
    neuron_fraction: float
    cores: int


@dataclass(frozen=True)
class UtilizationReport:
    core: CoreSpec
    scheme: Scheme
    bias_mode: BiasMode
    layers: tuple[LayerUtilization, ...]

    @property
    def total_cores(self):
        return sum(u.cores for u in self.layers)

    def to_dict(self):
        return {
            "core": {"axons": self.core.axons, "neurons": self.core.neurons},
            "scheme": self.scheme.value,
            "bias_mode": self.bias_mode.value,
            "layers": [asdict(u) for u in self.layers],
            "total_cores": self.total_cores,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def format_table(self):
        header = ("layer", "kind", "tile r x c x F", "N_axons*M_tile", "neurons", "axon%", "neuron%", "cores")
        rows = [header]
        for u in self.layers:
            t = u.tile
            rows.append((
                str(u.layer), u.kind, f"{t.rows}x{t.cols}x{t.features}", f"{t.n_axons}*{t.m_tile}",
                str(u.neurons_used), f"{100 * u.axon_fraction:.1f}", f"{100 * u.neuron_fraction:.1f}", str(u.cores),
            ))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
        lines.append(f"total cores: {self.total_cores}  (core {self.core}, {self.scheme.value}, bias={self.bias_mode.value})")
        return "\n".join(lines)


def layer_utilization(layer, core, scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON) -> LayerUtilization:
    t = select_tile(layer, core, scheme, bias_mode)
    o = layer.output.side
    cores = math.ceil(o / t.rows) * math.ceil(o / t.cols) * math.ceil(layer.out_channels / t.features)
    axons_used = physical_rows(t.axons, scheme, bias_mode)
    return LayerUtilization(
        layer=layer.index, kind=layer.kind.value, tile=t,
        axons_used=axons_used, neurons_used=t.neurons,
        axon_fraction=axons_used / core.axons, neuron_fraction=t.neurons / core.neurons,
        cores=cores,
    )


def utilization(net: ShapedNetwork, core: CoreSpec, scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON) -> UtilizationReport:
    scheme, bias_mode = Scheme(scheme), BiasMode(bias_mode)
    return UtilizationReport(core, scheme, bias_mode, tuple(layer_utilization(l, core, scheme, bias_mode) for l in net))
