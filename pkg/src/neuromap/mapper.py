"""Neuron naming, connectivity, core assignment and Toeplitz lowering of a network.

Indices inside arrays are 0-based. The text names exchanged with simulators
are 1-based: the network input is neuron layer ``L1`` and layer ``i`` (0-based
index into the network) produces neuron layer ``L{i+2}``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityViolation, FormatError, ParseError
from .netir import LayerKind, ShapedLayer, ShapedNetwork, infer_shapes, network_from_dict, network_hash, network_to_dict
from .refconv import LayerWeights, WeightSet, check_weights
from .tiler import (
    BiasMode,
    CoreSpec,
    Scheme,
    chunk_inputs,
    feature_chunks,
    physical_rows,
    select_tile,
    usable_axons,
)

# -- neuron names ----------------------------------------------------------

_NAME_RE = re.compile(r"L([1-9]\d*)-F([1-9]\d*)-N\[([1-9]\d*),([1-9]\d*)\]")


@dataclass(frozen=True, order=True)
class NeuronId:
    layer: int
    feature: int
    row: int
    col: int

    def __post_init__(self):
        if min(self.layer, self.feature, self.row, self.col) < 1:
            raise ValueError(f"neuron indices are 1-based: {self!r}")

    def __str__(self):
        return f"L{self.layer}-F{self.feature}-N[{self.row},{self.col}]"


def name_neuron(layer, feature, row, col) -> NeuronId:
    return NeuronId(layer, feature, row, col)


def parse_neuron(text: str) -> NeuronId:
    m = _NAME_RE.fullmatch(text)
    if m is None:
        raise ParseError(f"not a neuron name: {text!r}")
    return NeuronId(*map(int, m.groups()))


def neuron_names(layer_number, fcr):
    """Text names for rows of a 0-based ``(feature, row, col)`` array."""
    return [f"L{layer_number}-F{f + 1}-N[{r + 1},{c + 1}]" for f, r, c in fcr.tolist()]


# -- connectivity ----------------------------------------------------------

def grouped_kernel(layer, w: LayerWeights) -> np.ndarray:
    """Kernel as ``K x K x inputs_per_output x N``: every kind viewed as a grouped convolution."""
    if layer.kind in (LayerKind.DEPTHWISE, LayerKind.GLOBAL_AVG_POOL):
        # (K, K, M, D) -> output channel m*D + d reads input m
        k = layer.kernel
        return w.kernel.reshape(k, k, 1, -1)
    return w.kernel


@dataclass(frozen=True)
class LayerEdges:
    """Edges into one layer. Each row pairs a source ``(channel, row, col)`` in the
    layer input with a target ``(feature, row, col)`` in its output, plus the
    ``(kernel row, kernel col, local input channel)`` weight coordinate."""

    layer: int
    source: np.ndarray
    target: np.ndarray
    coord: np.ndarray

    def __len__(self):
        return len(self.source)

    def records(self):
        """Yield ``(source NeuronId, target NeuronId, coord)`` triples."""
        for s, t, c in zip(self.source.tolist(), self.target.tolist(), self.coord.tolist()):
            yield (NeuronId(self.layer + 1, s[0] + 1, s[1] + 1, s[2] + 1),
                   NeuronId(self.layer + 2, t[0] + 1, t[1] + 1, t[2] + 1), tuple(c))


@dataclass(frozen=True)
class ConnectivityList:
    layers: tuple[LayerEdges, ...]

    def __len__(self):
        return sum(len(e) for e in self.layers)


def layer_edges(layer: ShapedLayer) -> LayerEdges:
    k, s, p = layer.kernel, layer.stride, layer.padding
    side_in, o, n = layer.input.side, layer.output.side, layer.out_channels
    per_out = layer.out_channels // layer.group_count
    per_in = layer.inputs_per_output
    sources, targets, coords = [], [], []
    f, r, c = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(o), np.arange(o), indexing="ij"))
    first_in = (f // per_out) * per_in
    # Enumerate in (kernel row, kernel col, input channel) order per target.
    for kr in range(k):
        ir = r * s - p + kr
        for kc in range(k):
            ic = c * s - p + kc
            ok = (ir >= 0) & (ir < side_in) & (ic >= 0) & (ic < side_in)
            for ml in range(per_in):
                sources.append(np.stack([first_in[ok] + ml, ir[ok], ic[ok]], axis=1))
                targets.append(np.stack([f[ok], r[ok], c[ok]], axis=1))
                coords.append(np.tile([kr, kc, ml], (int(ok.sum()), 1)))
    if not sources:
        empty = np.zeros((0, 3), dtype=np.int64)
        return LayerEdges(layer.index, empty, empty, empty)
    src, tgt, crd = np.concatenate(sources), np.concatenate(targets), np.concatenate(coords)
    order = np.lexsort((crd[:, 2], crd[:, 1], crd[:, 0], tgt[:, 2], tgt[:, 1], tgt[:, 0]))
    return LayerEdges(layer.index, src[order].astype(np.int64), tgt[order].astype(np.int64), crd[order].astype(np.int64))


def build_connectivity(net: ShapedNetwork) -> ConnectivityList:
    """Every (source, target) synapse of the network; padded window cells produce no edge."""
    return ConnectivityList(tuple(layer_edges(layer) for layer in net))


# -- placement -------------------------------------------------------------

@dataclass
class Core:
    """One crossbar: its axon rows, neuron columns and (optionally explicit) weights.

    ``axons`` rows are ``(channel, row, col)`` of sources in the layer input,
    sorted row-major then by channel; ``neurons`` rows are ``(feature, row, col)``
    of targets. ``entries``/``bias`` hold an explicit sparse block when the
    placement was loaded from files; otherwise the block is lowered on demand.
    """

    index: int
    layer: int
    axons: np.ndarray
    neurons: np.ndarray
    entries: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    bias: np.ndarray | None = None

    @property
    def n_axons(self):
        return len(self.axons)

    @property
    def n_neurons(self):
        return len(self.neurons)


@dataclass
class Placement:
    net: ShapedNetwork
    core: CoreSpec
    scheme: Scheme
    bias_mode: BiasMode
    cores: list[Core]
    weights: WeightSet | None = None
    # per layer: (O, O, N) arrays giving each output neuron's core and column
    owner: list[np.ndarray] = field(default_factory=list)
    column: list[np.ndarray] = field(default_factory=list)

    def layer_cores(self, layer):
        return [c for c in self.cores if c.layer == layer]

    def locate(self, neuron: NeuronId):
        """``(core index, column)`` of a named neuron produced by some layer."""
        layer = neuron.layer - 2
        if not 0 <= layer < len(self.net):
            raise KeyError(str(neuron))
        idx = (neuron.row - 1, neuron.col - 1, neuron.feature - 1)
        return int(self.owner[layer][idx]), int(self.column[layer][idx])

    def physical_rows(self, core: Core):
        return physical_rows(core.n_axons, self.scheme, self.bias_mode)

    def core_entries(self, core: Core):
        """Sparse Toeplitz block of a core: ``(axon index, column, weight)`` sorted by column then axon."""
        if core.entries is not None:
            return core.entries
        if self.weights is None:
            raise ValueError("placement carries neither explicit blocks nor weights")
        return lower_core(self.net[core.layer], self.weights[core.layer], core)

    def core_bias(self, core: Core):
        if core.bias is not None:
            return core.bias
        return self.weights[core.layer].bias[core.neurons[:, 0]]

    def block(self, core: Core):
        """Dense signed block (``n_axons x n_neurons``) and the per-column bias."""
        ax, col, val = self.core_entries(core)
        w = np.zeros((core.n_axons, core.n_neurons))
        w[ax, col] = val
        return w, self.core_bias(core)


def _positions(tile_lo, tile_hi, k, s, p, side):
    """Sorted in-bounds input indices touched by outputs ``[tile_lo, tile_hi)`` along one axis."""
    idx = (np.arange(tile_lo, tile_hi)[:, None] * s - p + np.arange(k)[None, :]).ravel()
    return np.unique(idx[(idx >= 0) & (idx < side)])


def core_axons(layer: ShapedLayer, rows, cols, feats):
    k, s, p, side = layer.kernel, layer.stride, layer.padding, layer.input.side
    ir = _positions(*rows, k, s, p, side)
    ic = _positions(*cols, k, s, p, side)
    ch = np.arange(*chunk_inputs(layer, *feats))
    g_r, g_c, g_ch = np.meshgrid(ir, ic, ch, indexing="ij")
    return np.stack([g_ch.ravel(), g_r.ravel(), g_c.ravel()], axis=1).astype(np.int64)


def core_neurons(rows, cols, feats):
    g_r, g_c, g_f = np.meshgrid(np.arange(*rows), np.arange(*cols), np.arange(*feats), indexing="ij")
    return np.stack([g_f.ravel(), g_r.ravel(), g_c.ravel()], axis=1).astype(np.int64)


def lower_core(layer: ShapedLayer, w: LayerWeights, core: Core):
    """Place each column's kernel weights at the axon rows of its window sources."""
    k, s, p, side = layer.kernel, layer.stride, layer.padding, layer.input.side
    kernel = grouped_kernel(layer, w)
    per_in = layer.inputs_per_output
    per_out = layer.out_channels // layer.group_count

    # axon lookup tables along each source dimension
    ax = core.axons
    rows_u, cols_u, ch_u = np.unique(ax[:, 1]), np.unique(ax[:, 2]), np.unique(ax[:, 0])
    row_pos = np.full(side, -1)
    col_pos = np.full(side, -1)
    row_pos[rows_u] = np.arange(len(rows_u))
    col_pos[cols_u] = np.arange(len(cols_u))
    ch_lo = int(ch_u[0]) if len(ch_u) else 0

    f, r, c = core.neurons[:, 0], core.neurons[:, 1], core.neurons[:, 2]
    n = core.n_neurons
    offs = np.arange(k)
    ir = r[:, None] * s - p + offs  # (n, k)
    ic = c[:, None] * s - p + offs
    ok_r = (ir >= 0) & (ir < side)
    ok_c = (ic >= 0) & (ic < side)
    spatial = (row_pos[np.where(ok_r, ir, 0)][:, :, None] * len(cols_u)
               + col_pos[np.where(ok_c, ic, 0)][:, None, :])  # (n, k, k)
    chan = (f // per_out) * per_in - ch_lo  # first input channel of each column, local to the core
    # (n, k, k, per_in), C order: per column, kernel row, kernel col, input channel.
    # Axon ids grow along that order, so the flattened entries come out sorted by (column, axon).
    axon = (spatial[..., None] * len(ch_u) + chan[:, None, None, None] + np.arange(per_in)).astype(np.int64)
    mask = np.broadcast_to((ok_r[:, :, None] & ok_c[:, None, :])[..., None], axon.shape)
    values = np.moveaxis(kernel[:, :, :, f], 3, 0)
    cols = np.broadcast_to(np.arange(n)[:, None, None, None], axon.shape)
    return axon[mask], cols[mask].astype(np.int64), values[mask].astype(np.float64)


def map_network(net: ShapedNetwork, weights: WeightSet | None, core: CoreSpec,
                scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON) -> Placement:
    """Assign every neuron to exactly one core.

    Layers are processed in order; within a layer tiles are visited row-major
    over output space and, for each spatial tile, over feature chunks. Columns
    inside a core follow (row, col, feature) order. Sources feeding several
    cores appear in each of those cores' axon maps, never twice in one core.
    """
    scheme, bias_mode = Scheme(scheme), BiasMode(bias_mode)
    if weights is not None:
        for layer, w in zip(net, weights):
            check_weights(layer, w)
    budget = usable_axons(core, scheme, bias_mode)
    cores, owner, column = [], [], []
    for layer in net:
        tile = select_tile(layer, core, scheme, bias_mode)
        o, n = layer.output.side, layer.out_channels
        own = np.full((o, o, n), -1, dtype=np.int64)
        col = np.full((o, o, n), -1, dtype=np.int64)
        for r0 in range(0, o, tile.rows):
            rows = (r0, min(r0 + tile.rows, o))
            for c0 in range(0, o, tile.cols):
                cols = (c0, min(c0 + tile.cols, o))
                for feats in feature_chunks(n, tile.features):
                    c = Core(len(cores), layer.index, core_axons(layer, rows, cols, feats), core_neurons(rows, cols, feats))
                    if c.n_axons > budget or c.n_neurons > core.neurons:
                        raise CapacityViolation(
                            f"core {c.index} (layer {layer.index}) needs {c.n_axons} axons / {c.n_neurons} neurons"
                        )
                    tf, tr, tc = c.neurons.T
                    own[tr, tc, tf] = c.index
                    col[tr, tc, tf] = np.arange(c.n_neurons)
                    cores.append(c)
        owner.append(own)
        column.append(col)
    return Placement(net, core, scheme, bias_mode, cores, weights, owner, column)


def check_placement(p: Placement):
    """Re-verify the placement invariants; raises :class:`CapacityViolation` on failure."""
    budget = usable_axons(p.core, p.scheme, p.bias_mode)
    seen = [np.zeros((l.output.side, l.output.side, l.out_channels), dtype=np.int64) for l in p.net]
    for c in p.cores:
        if c.n_axons > budget or c.n_neurons > p.core.neurons:
            raise CapacityViolation(f"core {c.index} exceeds {p.core}")
        if len(np.unique(c.axons, axis=0)) != c.n_axons:
            raise CapacityViolation(f"core {c.index} has duplicate axons")
        f, r, col = c.neurons.T
        np.add.at(seen[c.layer], (r, col, f), 1)
    for i, s in enumerate(seen):
        if not np.all(s == 1):
            raise CapacityViolation(f"layer {i}: neurons mapped {int(s.min())}..{int(s.max())} times")


# -- export / import -------------------------------------------------------

CONNECTIONS = "connections.csv"
CORE_USAGE = "core_usage.csv"
MANIFEST = "placement.json"
CONNECTION_HEADER = ["core_id", "axon_index", "neuron_column", "source_neuron", "target_neuron", "weight"]
USAGE_HEADER = ["core_id", "layer", "axons_used", "neurons_used"]
BIAS_SOURCE = "BIAS"


def _fmt(x):
    return format(float(x), ".17g")


def connection_rows(p: Placement, core: Core):
    """Connection-list records of one core, sorted by (column, axon); bias rows included."""
    ax, col, val = p.core_entries(core)
    bias = p.core_bias(core)
    bias_axon = core.n_axons if p.bias_mode is BiasMode.AXON else -1
    ax = np.concatenate([ax, np.full(core.n_neurons, bias_axon)])
    col = np.concatenate([col, np.arange(core.n_neurons)])
    val = np.concatenate([val, bias])
    is_bias = np.concatenate([np.zeros(len(val) - core.n_neurons, bool), np.ones(core.n_neurons, bool)])
    order = np.lexsort((ax, col))
    src = neuron_names(core.layer + 1, core.axons)
    tgt = neuron_names(core.layer + 2, core.neurons)
    for i in order.tolist():
        a = int(ax[i])
        yield (core.index, a, int(col[i]), BIAS_SOURCE if is_bias[i] else src[a], tgt[col[i]], _fmt(val[i]))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def export_placement(p: Placement, directory, connection_list=True) -> dict:
    """Write the connection list, core-usage report and manifest; return the manifest.

    ``connection_list=False`` skips the per-synapse CSV (full-size presets have
    hundreds of millions of synapses); such a directory cannot be re-imported.
    """
    os.makedirs(directory, exist_ok=True)
    files = {}
    if connection_list:
        path = os.path.join(directory, CONNECTIONS)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CONNECTION_HEADER)
            for core in p.cores:
                w.writerows(connection_rows(p, core))
        files[CONNECTIONS] = _sha256(path)
    path = os.path.join(directory, CORE_USAGE)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(USAGE_HEADER)
        for core in p.cores:
            w.writerow([core.index, core.layer, p.physical_rows(core), core.n_neurons])
    files[CORE_USAGE] = _sha256(path)
    manifest = {
        "format": "neuromap-placement/1",
        "network": network_to_dict(p.net.spec),
        "network_hash": network_hash(p.net.spec),
        "core": {"axons": p.core.axons, "neurons": p.core.neurons},
        "scheme": p.scheme.value,
        "bias_mode": p.bias_mode.value,
        "connection_list": CONNECTIONS if connection_list else None,
        "core_usage": CORE_USAGE,
        "cores": len(p.cores),
        "sha256": files,
    }
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def _read_csv(path, header):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not rows or rows[0] != header:
        raise FormatError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def _to_int(text, where):
    try:
        return int(text)
    except ValueError:
        raise FormatError(f"{where}: not an integer: {text!r}") from None


def _to_float(text, where):
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{where}: not a number: {text!r}") from None
    if not np.isfinite(v):
        raise FormatError(f"{where}: non-finite weight {text!r}")
    return v


def _fcr(nid: NeuronId):
    return (nid.feature - 1, nid.row - 1, nid.col - 1)


def import_placement(directory) -> Placement:
    """Rebuild a placement (with explicit weight blocks) from exported files."""
    mpath = os.path.join(directory, MANIFEST)
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
        net = infer_shapes(network_from_dict(manifest["network"]))
        core_spec = CoreSpec(int(manifest["core"]["axons"]), int(manifest["core"]["neurons"]))
        scheme, bias_mode = Scheme(manifest["scheme"]), BiasMode(manifest["bias_mode"])
        conn_name, usage_name, n_cores = manifest["connection_list"], manifest["core_usage"], int(manifest["cores"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{mpath}: {exc}") from exc
    if manifest.get("network_hash") != network_hash(net.spec):
        raise FormatError(f"{mpath}: network hash does not match the embedded network")
    if not conn_name:
        raise FormatError(f"{mpath}: exported without a connection list; cannot import")

    usage = {}
    for i, row in enumerate(_read_csv(os.path.join(directory, usage_name), USAGE_HEADER)):
        where = f"{usage_name}:{i + 2}"
        if len(row) != 4:
            raise FormatError(f"{where}: expected 4 fields")
        cid, layer, axons_used, neurons_used = (_to_int(v, where) for v in row)
        if not 0 <= layer < len(net) or cid in usage:
            raise FormatError(f"{where}: bad core id or layer index")
        usage[cid] = (layer, axons_used, neurons_used)
    if sorted(usage) != list(range(n_cores)):
        raise FormatError(f"{usage_name}: core ids are not 0..{n_cores - 1}")

    per_core = {cid: ({}, {}, [], {}) for cid in range(n_cores)}  # axon map, neuron map, edges, bias
    for i, row in enumerate(_read_csv(os.path.join(directory, conn_name), CONNECTION_HEADER)):
        where = f"{conn_name}:{i + 2}"
        if len(row) != 6:
            raise FormatError(f"{where}: expected 6 fields")
        cid, axon, column = (_to_int(v, where) for v in row[:3])
        weight = _to_float(row[5], where)
        if cid not in per_core:
            raise FormatError(f"{where}: unknown core {cid}")
        axons, neurons, edges, bias = per_core[cid]
        layer = usage[cid][0]
        try:
            target = parse_neuron(row[4])
        except ParseError as exc:
            raise FormatError(f"{where}: {exc}") from exc
        if target.layer != layer + 2 or neurons.setdefault(column, target) != target:
            raise FormatError(f"{where}: inconsistent target {row[4]} for column {column}")
        if row[3] == BIAS_SOURCE:
            if column in bias:
                raise FormatError(f"{where}: duplicate bias for column {column}")
            bias[column] = (axon, weight)
            continue
        try:
            source = parse_neuron(row[3])
        except ParseError as exc:
            raise FormatError(f"{where}: {exc}") from exc
        if source.layer != layer + 1 or axons.setdefault(axon, source) != source:
            raise FormatError(f"{where}: inconsistent source {row[3]} for axon {axon}")
        edges.append((axon, column, weight))

    cores, owner, column_idx = [], [], []
    for layer in net:
        o, n = layer.output.side, layer.out_channels
        owner.append(np.full((o, o, n), -1, dtype=np.int64))
        column_idx.append(np.full((o, o, n), -1, dtype=np.int64))
    for cid in range(n_cores):
        axons, neurons, edges, bias = per_core[cid]
        layer_i, axons_used, neurons_used = usage[cid]
        if sorted(axons) != list(range(len(axons))) or sorted(neurons) != list(range(len(neurons))):
            raise FormatError(f"core {cid}: axon or column indices are not contiguous")
        if sorted(bias) != list(range(len(neurons))):
            raise FormatError(f"core {cid}: every column needs exactly one bias record")
        expected_bias_axon = len(axons) if bias_mode is BiasMode.AXON else -1
        if any(a != expected_bias_axon for a, _ in bias.values()):
            raise FormatError(f"core {cid}: bias records must use axon index {expected_bias_axon}")
        ax_arr = np.array([_fcr(axons[a]) for a in range(len(axons))], dtype=np.int64).reshape(-1, 3)
        nr_arr = np.array([_fcr(neurons[c]) for c in range(len(neurons))], dtype=np.int64).reshape(-1, 3)
        e = np.array(edges, dtype=np.float64).reshape(-1, 3)
        entries = (e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2].copy())
        core = Core(cid, layer_i, ax_arr, nr_arr, entries, np.array([bias[c][1] for c in range(len(neurons))]))
        if physical_rows(core.n_axons, scheme, bias_mode) != axons_used or core.n_neurons != neurons_used:
            raise FormatError(f"core {cid}: usage report disagrees with the connection list")
        shaped = net[layer_i]
        if len(nr_arr) and ((nr_arr[:, 0] >= shaped.out_channels).any() or (nr_arr[:, 1:] >= shaped.output.side).any()):
            raise FormatError(f"core {cid}: target outside layer {layer_i}")
        if len(ax_arr) and ((ax_arr[:, 0] >= shaped.in_channels).any() or (ax_arr[:, 1:] >= shaped.input.side).any()):
            raise FormatError(f"core {cid}: source outside layer {layer_i} input")
        f, r, c = nr_arr.T
        if (owner[layer_i][r, c, f] != -1).any():
            raise FormatError(f"core {cid}: neuron mapped twice")
        owner[layer_i][r, c, f] = cid
        column_idx[layer_i][r, c, f] = np.arange(len(nr_arr))
        cores.append(core)
    placement = Placement(net, core_spec, scheme, bias_mode, cores, None, owner, column_idx)
    try:
        check_placement(placement)
    except CapacityViolation as exc:
        raise FormatError(str(exc)) from exc
    return placement
