"""Crossbar matrix-vector products under two signed-weight schemes, and mapped-network execution.

Column currents are accumulated over crossbar rows in ascending row order,
starting from zero. Under the split scheme each logical axon occupies two
physical rows, its positive-weight row driven by ``+x`` followed by its
negative-weight row driven by ``-x``. Since at most one of the two weights is
nonzero, every row pair adds exactly ``x * w``, so split and differential
crossbars give bit-identical results.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, MissingActivation, NeuromapError
from .mapper import Placement
from .netir import Activation
from .refconv import WeightSet, apply_activation, run_network
from .tiler import BiasMode, Scheme


def split_weights(w):
    """Separate a signed matrix into non-negative ``(positive, negative)`` parts with ``w = pos - neg``."""
    w = np.asarray(w, dtype=np.float64)
    return np.maximum(w, 0.0), np.maximum(-w, 0.0)


def column_sums(x, rows):
    """``sum_i x[i] * rows[i]`` per column, accumulated strictly in row order from 0."""
    terms = np.asarray(x)[:, None] * rows
    acc = np.zeros(rows.shape[1])
    for t in terms:
        acc += t
    return acc


class CoreState:
    """A programmed crossbar: conductance rows, neuron offsets and activation.

    ``block`` is the signed ``axons x neurons`` weight matrix and ``bias`` the
    per-column bias. With ``bias_mode="axon"`` the bias becomes one extra row
    driven by a constant 1; otherwise it is added at the neuron.
    """

    def __init__(self, block, bias=None, activation=Activation.NONE,
                 scheme=Scheme.DIFFERENTIAL, bias_mode=BiasMode.NEURON):
        block = np.asarray(block, dtype=np.float64)
        self.n_axons, self.n_neurons = block.shape
        self.scheme = Scheme(scheme)
        self.bias_mode = BiasMode(bias_mode)
        self.activation = Activation(activation)
        bias = np.zeros(self.n_neurons) if bias is None else np.asarray(bias, dtype=np.float64)
        if bias.shape != (self.n_neurons,):
            raise LengthMismatch(f"bias has {bias.shape} entries for {self.n_neurons} columns")
        if self.bias_mode is BiasMode.AXON:
            block = np.vstack([block, bias[None, :]])
            self.offset = None
        else:
            self.offset = bias
        if self.scheme is Scheme.SPLIT:
            pos, neg = split_weights(block)
            self.rows = np.empty((2 * block.shape[0], self.n_neurons))
            self.rows[0::2] = pos
            self.rows[1::2] = neg
        else:
            self.rows = block

    @property
    def stored_rows(self):
        return self.rows.shape[0]

    def drive(self, x):
        """Row input vector for activations ``x`` (bias axon and negated copies included)."""
        x = np.asarray(x, dtype=np.float64)
        if self.bias_mode is BiasMode.AXON:
            x = np.append(x, 1.0)
        if self.scheme is Scheme.SPLIT:
            d = np.empty(2 * len(x))
            d[0::2] = x
            d[1::2] = -x
            return d
        return x


def core_mvm(core: CoreState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (core.n_axons,):
        raise LengthMismatch(f"input has {x.shape} entries, core has {core.n_axons} axons")
    y = column_sums(core.drive(x), core.rows)
    if core.offset is not None:
        y = y + core.offset
    return apply_activation(y, core.activation)


def _gather(prev, axons, core_index):
    ch, r, c = axons[:, 0], axons[:, 1], axons[:, 2]
    side, _, channels = prev.shape
    bad = (ch < 0) | (ch >= channels) | (r < 0) | (r >= side) | (c < 0) | (c >= side)
    if bad.any():
        raise MissingActivation(f"core {core_index}: axon {int(np.argmax(bad))} names a neuron the previous layer does not produce")
    return prev[r, c, ch]


def run_layer_mapped(p: Placement, layer_index, x):
    layer = p.net[layer_index]
    o = layer.output.side
    out = np.full((o, o, layer.out_channels), np.nan)
    for core in p.layer_cores(layer_index):
        w, bias = p.block(core)
        state = CoreState(w, bias, layer.activation, p.scheme, p.bias_mode)
        y = core_mvm(state, _gather(x, core.axons, core.index))
        f, r, c = core.neurons.T
        out[r, c, f] = y
    if np.isnan(out).any():
        raise MissingActivation(f"layer {layer_index}: some neurons are not produced by any core")
    return out


def run_mapped(p: Placement, x) -> list[np.ndarray]:
    """Execute the placement core by core; returns ``[x, out_0, out_1, ...]`` like the reference."""
    trace = [np.asarray(x, dtype=np.float64)]
    shape = p.net.input
    if trace[0].shape != (shape.side, shape.side, shape.channels):
        raise LengthMismatch(f"input shape {trace[0].shape}, expected {shape}")
    for i in range(len(p.net)):
        trace.append(run_layer_mapped(p, i, trace[-1]))
    return trace


@dataclass
class LayerDeviation:
    layer: int
    max_abs: float
    max_rel: float
    worst_core: int
    passed: bool

    def to_dict(self):
        return {"layer": self.layer, "max_abs": self.max_abs, "max_rel": self.max_rel,
                "worst_core": self.worst_core, "pass": self.passed}


@dataclass
class VerificationReport:
    tolerance: float
    inputs: int
    layers: list[LayerDeviation]

    @property
    def passed(self):
        return all(l.passed for l in self.layers)

    @property
    def first_failure(self):
        """Index of the first layer outside tolerance, or ``None``."""
        return next((l.layer for l in self.layers if not l.passed), None)

    def to_dict(self):
        return {"tolerance": self.tolerance, "inputs": self.inputs, "pass": self.passed,
                "first_failing_layer": self.first_failure, "layers": [l.to_dict() for l in self.layers]}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


class VerificationError(NeuromapError):
    pass


def verify(p: Placement, weights: WeightSet, inputs, tolerance=1e-6) -> VerificationReport:
    """Compare mapped execution against the dense reference over every input.

    A layer passes when each output satisfies ``|mapped - ref| <= tolerance * max(1, |ref|)``.
    ``max_rel`` is ``|mapped - ref| / |ref|`` over outputs with nonzero reference.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    n = len(p.net)
    max_abs = np.zeros(n)
    max_rel = np.zeros(n)
    worst = np.full(n, -1)
    ok = np.ones(n, dtype=bool)
    count = 0
    for x in inputs:
        count += 1
        ref = run_network(p.net, weights, x)
        try:
            got = run_mapped(p, x)
        except NeuromapError as exc:
            raise VerificationError(f"mapped execution failed: {exc}") from exc
        for i in range(n):
            r, g = ref[i + 1], got[i + 1]
            dev = np.abs(g - r)
            scale = np.abs(r)
            ok[i] &= bool(np.all(dev <= tolerance * np.maximum(1.0, scale)))
            if dev.size and dev.max() > max_abs[i]:
                max_abs[i] = dev.max()
                worst[i] = p.owner[i].flat[int(np.argmax(dev))]
            nz = scale > 0
            if nz.any():
                max_rel[i] = max(max_rel[i], float((dev[nz] / scale[nz]).max()))
    layers = [LayerDeviation(i, float(max_abs[i]), float(max_rel[i]), int(worst[i]), bool(ok[i])) for i in range(n)]
    return VerificationReport(tolerance, count, layers)
