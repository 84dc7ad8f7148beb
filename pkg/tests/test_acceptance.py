"""Acceptance gate: one printed PASS/FAIL line per criterion, then the assertion."""
import filecmp
import time

import numpy as np
import pytest

from neuromap.errors import FanInExceedsCore
from neuromap.mapper import export_placement, import_placement, map_network
from neuromap.netir import PRESET_NAMES, LayerKind, NetworkSpec, TensorShape, infer_shapes, mac_cost, preset
from neuromap.refconv import random_input, random_weights, run_network
from neuromap.tiler import CORE_PRESETS, BiasMode, Scheme, axon_count, utilization
from neuromap.xbar import CoreState, core_mvm, run_mapped, verify

from oracles import ALL_KINDS, core_for, count_macs, random_layer, random_network, union_count
from preset_shapes import PRESET_SHAPES


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'}: {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_axon_count_matches_union(report):
    start = time.perf_counter()
    failures = []
    cases = 0
    for k in (1, 3, 5, 7):
        for s in (1, 2, 3):
            for r in range(1, 9):
                for c in range(1, 9):
                    cases += 1
                    got = axon_count(k, s, r, c)
                    closed = (k + s * (r - 1)) * (k + s * (c - 1))
                    if not (got == union_count(k, s, r, c) == closed):
                        failures.append((k, s, r, c))
    elapsed = time.perf_counter() - start
    detail = f"{cases} cases, {len(failures)} failures, {elapsed:.3f}s"
    if failures:
        detail += f"; all failures have S > K: {all(s > k for k, s, _, _ in failures)}; first {failures[:3]}"
    report("axon count vs receptive-field union", not failures and elapsed < 1.0, detail)


def test_preset_shapes(report):
    start = time.perf_counter()
    mismatches = []
    for name in PRESET_NAMES:
        net = infer_shapes(preset(name))
        for i, (kind, shape_in, shape_out) in enumerate(PRESET_SHAPES[name]):
            layer = net[i]
            got = (layer.kind.value[0] if layer.kind is not LayerKind.STANDARD else "C",
                   (layer.input.side, layer.input.channels), (layer.output.side, layer.output.channels))
            if got != (kind, shape_in, shape_out):
                mismatches.append((name, i, got))
    elapsed = time.perf_counter() - start
    report("table shapes (3 presets x 21 layers)", not mismatches and elapsed < 10,
           f"{3 * 21} rows, {len(mismatches)} mismatches {mismatches[:2]}, {elapsed:.2f}s")


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_preset_maps_on_designated_core(report, name):
    size = int(name.split("-")[1])
    net = infer_shapes(preset(name))
    start = time.perf_counter()
    try:
        rep = utilization(net, CORE_PRESETS[size], Scheme.DIFFERENTIAL)
        ok, detail = True, f"{rep.total_cores} cores"
    except FanInExceedsCore as exc:
        ok, detail = False, str(exc)
    elapsed = time.perf_counter() - start
    report(f"{name} maps on {size}x{size} without fan-in errors", ok and elapsed < 10, f"{detail}, {elapsed:.2f}s")


def test_end_to_end_lowering(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, runs, kinds = 0.0, 0, set()
    for i in range(50):
        net = random_network(rng, must_include=ALL_KINDS[i % len(ALL_KINDS)])
        kinds.update(layer.kind for layer in net)
        weights = random_weights(net, seed=i)
        x = random_input(net, rng)
        ref = run_network(net, weights, x)
        for scheme in Scheme:
            bias_mode = BiasMode.AXON if i % 2 else BiasMode.NEURON
            p = map_network(net, weights, core_for(net, rng, scheme, bias_mode), scheme, bias_mode)
            got = run_mapped(p, x)
            runs += 1
            worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(got, ref)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 60 and kinds == set(ALL_KINDS)
    report("mapped trace vs dense reference (50 nets x 2 schemes)", ok,
           f"{runs} runs, max |dev| {worst:.3g}, {len(kinds)} kinds, {elapsed:.1f}s")


def test_scheme_equivalence(report):
    rng = np.random.default_rng(7)
    differing = 0
    for _ in range(1000):
        a, n = (int(v) for v in rng.integers(1, 65, size=2))
        block = rng.uniform(-1, 1, size=(a, n)) * (rng.random((a, n)) < 0.7)
        bias = rng.uniform(-1, 1, size=n)
        x = rng.uniform(-1, 1, size=a)
        bias_mode = BiasMode.AXON if rng.random() < 0.5 else BiasMode.NEURON
        act = "ReLU" if rng.random() < 0.5 else "None"
        outs = [core_mvm(CoreState(block, bias, act, scheme, bias_mode), x) for scheme in (Scheme.SPLIT, Scheme.DIFFERENTIAL)]
        differing += outs[0].tobytes() != outs[1].tobytes()
    report("split vs differential bit-identical (1000 blocks)", differing == 0, f"{differing} differing blocks")


def test_mac_cost_oracle(report):
    rng = np.random.default_rng(11)
    mismatches, kinds = [], set()
    for i in range(100):
        kind = ALL_KINDS[i % len(ALL_KINDS)]
        side, m = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        spec = random_layer(rng, kind, side, m)
        layer = infer_shapes(NetworkSpec(TensorShape(side, m), (spec,)))[0]
        kinds.add(layer.kind)
        if mac_cost(layer) != count_macs(layer):
            mismatches.append((spec, mac_cost(layer), count_macs(layer)))
    report("MAC cost vs counting loop (100 layers)", not mismatches and kinds == set(ALL_KINDS),
           f"{len(mismatches)} mismatches over {len(kinds)} kinds")


def test_core_count_monotonic(report):
    compared, violations, skipped = 0, [], []
    for name in PRESET_NAMES:
        net = infer_shapes(preset(name))
        totals = {}
        for size, core in CORE_PRESETS.items():
            try:
                totals[size] = utilization(net, core).total_cores
            except FanInExceedsCore:
                skipped.append((name, size))
        for small, big in ((256, 512), (512, 1024), (256, 1024)):
            if small in totals and big in totals:
                compared += 1
                if totals[big] > totals[small]:
                    violations.append((name, small, big, totals[small], totals[big]))
    report("core count non-increasing with core size", not violations,
           f"{compared} feasible pairs compared, {len(violations)} violations, infeasible {skipped}")


def _round_trip(tmp, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, must_include=LayerKind.DEPTHWISE)
    weights = random_weights(net, seed=seed)
    p = map_network(net, weights, core_for(net, rng))
    export_placement(p, tmp / "a")
    q = import_placement(tmp / "a")
    export_placement(q, tmp / "b")
    in_rng = np.random.default_rng([seed, 1])
    inputs = [random_input(net, in_rng) for _ in range(3)]
    return verify(q, weights, inputs).to_json()


def test_determinism_round_trip(report, tmp_path):
    outcomes = [_round_trip(tmp_path / f"run{i}", seed=5) for i in range(2)]
    names = ["connections.csv", "core_usage.csv", "placement.json"]
    same_reexport = all(filecmp.cmp(tmp_path / "run0" / "a" / f, tmp_path / "run0" / "b" / f, shallow=False)
                        for f in names)
    same_runs = all(filecmp.cmp(tmp_path / "run0" / "a" / f, tmp_path / "run1" / "a" / f, shallow=False)
                    for f in names)
    ok = same_reexport and same_runs and outcomes[0] == outcomes[1] and '"pass": true' in outcomes[0]
    report("export/import/verify determinism", ok,
           f"re-export identical {same_reexport}, runs identical {same_runs}, reports equal {outcomes[0] == outcomes[1]}")


def test_fault_detection(report, tmp_path):
    rng = np.random.default_rng(3)
    net = random_network(rng, must_include=LayerKind.STANDARD)
    weights = random_weights(net, seed=3)
    p = map_network(net, weights, core_for(net, rng))
    export_placement(p, tmp_path)
    path = tmp_path / "connections.csv"
    lines = path.read_text().splitlines()
    # a synapse of layer 0: its sources are network inputs, which are never zero here
    target = next(i for i, row in enumerate(lines[1:], 1) if row.startswith("0,") and ",BIAS," not in row)
    fields = lines[target].split(",")
    fields[-1] = repr(float(fields[-1]) + 0.1)
    lines[target] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    inputs = [random_input(net, rng) for _ in range(4)]
    rep = verify(import_placement(tmp_path), weights, inputs)
    expected = 0
    report("perturbed synapse detected", not rep.passed and rep.first_failure == expected,
           f"pass={rep.passed}, first failing layer {rep.first_failure} (perturbed {expected})")
