import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuromap.errors import FormatError, ParseError
from neuromap.mapper import (
    NeuronId,
    build_connectivity,
    check_placement,
    export_placement,
    import_placement,
    map_network,
    name_neuron,
    parse_neuron,
)
from neuromap.netir import LayerKind, LayerSpec, NetworkSpec, TensorShape, infer_shapes
from neuromap.refconv import LayerWeights, random_weights
from neuromap.tiler import BiasMode, CoreSpec, Scheme, axon_count, select_tile

from oracles import ALL_KINDS, connects, core_for, random_network, weight_at


def shaped(side, channels, *layers):
    return infer_shapes(NetworkSpec(TensorShape(side, channels), layers))


def test_neuron_names():
    assert str(name_neuron(1, 1, 1, 1)) == "L1-F1-N[1,1]"
    assert str(name_neuron(3, 64, 28, 28)) == "L3-F64-N[28,28]"
    assert parse_neuron("L2-F5-N[7,9]") == NeuronId(2, 5, 7, 9)


@pytest.mark.parametrize("text", ["L0-F1-N[1,1]", "L1-F01-N[1,1]", "L1-F1-N[1, 1]", "l1-F1-N[1,1]", "L1-F1-N[1,1] "])
def test_bad_neuron_names(text):
    with pytest.raises((ParseError, ValueError)):
        parse_neuron(text)


@given(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 10**6))
def test_neuron_name_round_trip(layer, feature, row, col):
    nid = NeuronId(layer, feature, row, col)
    assert parse_neuron(str(nid)) == nid


def _in_edges(edges):
    counts = {}
    for src, tgt, _ in edges.records():
        counts.setdefault(tgt, []).append(src)
    return counts


def test_overlapping_windows_share_six_sources():
    net = shaped(4, 1, LayerSpec("Standard", 3, 1, 0, 1, 1))
    sources = _in_edges(build_connectivity(net).layers[0])
    assert len(sources) == 4 and all(len(v) == 9 for v in sources.values())
    left, right = sources[NeuronId(2, 1, 1, 1)], sources[NeuronId(2, 1, 1, 2)]
    assert len(set(left) & set(right)) == 6


def test_pointwise_fan_in_equals_channels():
    net = shaped(3, 3, LayerSpec("Pointwise", in_channels=3, out_channels=2))
    assert all(len(v) == 3 for v in _in_edges(build_connectivity(net).layers[0]).values())


def test_padded_corner_drops_out_of_bounds_cells():
    net = shaped(5, 1, LayerSpec("Standard", 3, 1, 1, 1, 1))
    sources = _in_edges(build_connectivity(net).layers[0])
    assert len(sources[NeuronId(2, 1, 1, 1)]) == 4
    assert len(sources[NeuronId(2, 1, 1, 2)]) == 6
    assert len(sources[NeuronId(2, 1, 3, 3)]) == 9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_KINDS))
def test_connectivity_matches_definition(seed, kind):
    net = random_network(np.random.default_rng(seed), must_include=kind, max_side=7, max_channels=4)
    for layer, edges in zip(net, build_connectivity(net).layers):
        expected = set()
        k, s, p, side = layer.kernel, layer.stride, layer.padding, layer.input.side
        for orow in range(layer.output.side):
            for ocol in range(layer.output.side):
                for n in range(layer.out_channels):
                    for kr in range(k):
                        for kc in range(k):
                            ir, ic = orow * s - p + kr, ocol * s - p + kc
                            if 0 <= ir < side and 0 <= ic < side:
                                expected.update((m, ir, ic, n, orow, ocol)
                                                for m in range(layer.in_channels) if connects(layer, m, n))
        got = {tuple(a) + tuple(b) for a, b in zip(edges.source.tolist(), edges.target.tolist())}
        assert got == expected and len(edges) == len(expected)


def test_one_dimensional_toeplitz_block():
    # only the first kernel row is nonzero, so input row 0 -> output row 0 acts as
    # a 1-D convolution: 3 inputs, K=2, 2 outputs
    net = shaped(3, 1, LayerSpec("Standard", 2, 1, 0, 1, 1, activation="None"))
    w1, w2 = 0.25, -0.75
    kernel = np.zeros((2, 2, 1, 1))
    kernel[0, 0, 0, 0], kernel[0, 1, 0, 0] = w1, w2
    p = map_network(net, [LayerWeights(kernel, np.zeros(1))], CoreSpec(9, 2))
    core = p.cores[0]
    assert core.neurons.tolist()[:2] == [[0, 0, 0], [0, 0, 1]]
    block, _ = p.block(core)
    first_row = [i for i, (_, r, _) in enumerate(core.axons.tolist()) if r == 0]
    assert [core.axons[i].tolist() for i in first_row] == [[0, 0, 0], [0, 0, 1], [0, 0, 2]]
    np.testing.assert_array_equal(block[first_row, :2], [[w1, 0], [w2, w1], [0, w2]])


def test_single_neuron_core_with_bias_axon():
    net = shaped(1, 1, LayerSpec("Pointwise", in_channels=1, out_channels=1))
    w = LayerWeights(np.full((1, 1, 1, 1), 0.5), np.array([0.25]))
    p = map_network(net, [w], CoreSpec(2, 1), bias_mode=BiasMode.AXON)
    (core,) = p.cores
    assert core.n_axons == 1 and p.physical_rows(core) == 2 and core.n_neurons == 1
    block, bias = p.block(core)
    assert block.tolist() == [[0.5]] and bias.tolist() == [0.25]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_KINDS), st.sampled_from(list(Scheme)),
       st.sampled_from(list(BiasMode)))
def test_placement_invariants(seed, kind, scheme, bias_mode):
    rng = np.random.default_rng(seed)
    net = random_network(rng, must_include=kind)
    weights = random_weights(net, seed=seed)
    p = map_network(net, weights, core_for(net, rng, scheme, bias_mode), scheme, bias_mode)
    check_placement(p)
    for layer in net:
        tile = select_tile(layer, p.core, scheme, bias_mode)
        k, s = layer.kernel, layer.stride
        for core in p.layer_cores(layer.index):
            rows = np.unique(core.neurons[:, 1]).size
            cols = np.unique(core.neurons[:, 2]).size
            channels = np.unique(core.axons[:, 0]).size
            # clipped at the borders, never more than the closed-form footprint
            assert core.n_axons <= axon_count(k, s, rows, cols) * channels <= tile.axons
            extra = 1 if bias_mode is BiasMode.AXON else 0
            assert p.physical_rows(core) == (core.n_axons + extra) * (2 if scheme is Scheme.SPLIT else 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_KINDS))
def test_blocks_hold_exactly_the_layer_synapses(seed, kind):
    rng = np.random.default_rng(seed)
    net = random_network(rng, must_include=kind, max_side=8, max_channels=5)
    weights = random_weights(net, seed=seed)
    p = map_network(net, weights, core_for(net, rng))
    conn = build_connectivity(net)
    for layer, edges, w in zip(net, conn.layers, weights):
        expected = {}
        for src, tgt, (kr, kc, _) in zip(edges.source.tolist(), edges.target.tolist(), edges.coord.tolist()):
            expected[tuple(src) + tuple(tgt)] = weight_at(layer, w.kernel, kr, kc, src[0], tgt[0])
        got = {}
        for core in p.layer_cores(layer.index):
            ax, col, val = p.core_entries(core)
            for a, c, v in zip(ax.tolist(), col.tolist(), val.tolist()):
                got[tuple(core.axons[a]) + tuple(core.neurons[c])] = v
        assert got == expected


def test_locate_and_owner():
    net = random_network(np.random.default_rng(9), must_include=LayerKind.GROUPED)
    p = map_network(net, random_weights(net), core_for(net, np.random.default_rng(9)))
    for layer in net:
        for core in p.layer_cores(layer.index):
            for col, (f, r, c) in enumerate(core.neurons.tolist()):
                assert p.locate(NeuronId(layer.index + 2, f + 1, r + 1, c + 1)) == (core.index, col)


def _toy_placement(seed=4, bias_mode=BiasMode.NEURON, scheme=Scheme.DIFFERENTIAL):
    rng = np.random.default_rng(seed)
    net = random_network(rng, must_include=LayerKind.DEPTHWISE)
    weights = random_weights(net, seed=seed)
    return map_network(net, weights, core_for(net, rng, scheme, bias_mode), scheme, bias_mode), weights


@pytest.mark.parametrize("bias_mode", list(BiasMode))
@pytest.mark.parametrize("scheme", list(Scheme))
def test_export_import_round_trip(tmp_path, bias_mode, scheme):
    p, _ = _toy_placement(bias_mode=bias_mode, scheme=scheme)
    export_placement(p, tmp_path / "a")
    q = import_placement(tmp_path / "a")
    assert (q.scheme, q.bias_mode, q.core, len(q.cores)) == (p.scheme, p.bias_mode, p.core, len(p.cores))
    for a, b in zip(p.cores, q.cores):
        assert a.layer == b.layer
        np.testing.assert_array_equal(a.axons, b.axons)
        np.testing.assert_array_equal(a.neurons, b.neurons)
        wa, ba = p.block(a)
        wb, bb = q.block(b)
        assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()
    export_placement(q, tmp_path / "b")
    for name in ("connections.csv", "core_usage.csv", "placement.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_connection_list_records(tmp_path):
    p, _ = _toy_placement(bias_mode=BiasMode.AXON)
    export_placement(p, tmp_path)
    with open(tmp_path / "connections.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    synapses = sum(len(p.core_entries(c)[0]) for c in p.cores)
    neurons = sum(c.n_neurons for c in p.cores)
    assert len(rows) == synapses + neurons
    for row in rows:
        tgt = parse_neuron(row["target_neuron"])
        core = p.cores[int(row["core_id"])]
        assert tgt.layer == core.layer + 2
        if row["source_neuron"] == "BIAS":
            assert int(row["axon_index"]) == core.n_axons
        else:
            assert parse_neuron(row["source_neuron"]).layer == core.layer + 1
    usage = json.loads((tmp_path / "placement.json").read_text())
    assert usage["cores"] == len(p.cores)


def test_export_is_deterministic(tmp_path):
    for run in ("x", "y"):
        p, _ = _toy_placement(seed=12)
        export_placement(p, tmp_path / run)
    for name in ("connections.csv", "core_usage.csv", "placement.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


@pytest.mark.parametrize("corrupt", [
    lambda lines: lines.__setitem__(1, lines[1].rsplit(",", 1)[0] + ",abc"),
    lambda lines: lines.__setitem__(1, lines[1].rsplit(",", 1)[0] + ",nan"),
    lambda lines: lines.__setitem__(1, lines[1] + ",7"),
    lambda lines: lines.__setitem__(0, "core,axon,column,src,dst,w"),
    lambda lines: lines.__setitem__(1, "99999" + lines[1][lines[1].index(","):]),
])
def test_import_rejects_corrupt_connection_list(tmp_path, corrupt):
    p, _ = _toy_placement()
    export_placement(p, tmp_path)
    path = tmp_path / "connections.csv"
    lines = path.read_text().splitlines()
    corrupt(lines)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        import_placement(tmp_path)


def test_import_rejects_tampered_manifest(tmp_path):
    p, _ = _toy_placement()
    export_placement(p, tmp_path)
    doc = json.loads((tmp_path / "placement.json").read_text())
    doc["network"]["layers"][0]["N"] += 1
    (tmp_path / "placement.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        import_placement(tmp_path)
