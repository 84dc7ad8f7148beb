"""Command-line front end: validate, map and verify networks on crossbar cores.

Exit codes: 0 success/pass, 1 mapping infeasible or verification failed,
2 usage, parse or artifact errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import netir
from .errors import FanInExceedsCore, NeuromapError
from .mapper import MANIFEST, export_placement, import_placement, map_network
from .refconv import WEIGHT_MANIFEST, load_weights, random_input, random_weights, save_weights
from .tiler import BiasMode, CoreSpec, Scheme, usable_axons, utilization
from .xbar import verify

log = logging.getLogger("neuromap")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    preset: str | None
    net_path: str | None
    core: CoreSpec
    scheme: Scheme
    bias_mode: BiasMode
    tolerance: float
    out: str | None
    seed: int
    inputs: int


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    try:
        core = CoreSpec.parse(args.core)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.tolerance <= 0:
        raise UsageError("--tolerance must be > 0")
    if getattr(args, "inputs", 1) < 1:
        raise UsageError("--inputs must be >= 1")
    return RunConfig(
        preset=args.preset, net_path=args.net, core=core, scheme=Scheme(args.scheme),
        bias_mode=BiasMode(args.bias_mode), tolerance=args.tolerance, out=args.out,
        seed=args.seed, inputs=getattr(args, "inputs", 1),
    )


def _load_net(cfg: RunConfig):
    if cfg.preset:
        spec = netir.preset(cfg.preset)
    elif cfg.net_path:
        spec = netir.load_network(cfg.net_path)
    else:
        raise UsageError("one of --preset or --net is required")
    return netir.infer_shapes(spec)


def _input_rng(seed):
    return np.random.default_rng([seed, 1])


def cmd_validate(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    net = _load_net(cfg)
    budget = usable_axons(cfg.core, cfg.scheme, cfg.bias_mode)
    costs = netir.complexity(net)
    print(f"network {net.name}: input {net.input}, {len(net)} layers; core {cfg.core}, "
          f"{cfg.scheme.value}, {budget} usable axons", file=out)
    bad = []
    for layer, macs in zip(net, costs.per_layer):
        fits = layer.fan_in <= budget
        if not fits:
            bad.append(layer)
        print(f"  [{layer.index:2d}] {layer.kind.value:<14} {str(layer.input):>13} -> {str(layer.output):<13} "
              f"MACs {macs:>12,d}  fan-in {layer.fan_in:5d}/{budget}  {'ok' if fits else 'EXCEEDS CORE'}", file=out)
    print(f"total MACs {costs.total:,d}", file=out)
    for layer in bad:
        print(f"layer {layer.index} ({layer.kind.value}) does not fit: fan-in {layer.fan_in} > {budget}", file=out)
    return EXIT_FAIL if bad else EXIT_OK


def _weights_for(net, cfg, directory=None):
    if directory and os.path.exists(os.path.join(directory, WEIGHT_MANIFEST)):
        log.info("loading weights from %s", directory)
        return load_weights(net, directory)
    log.info("random weights, seed %d", cfg.seed)
    return random_weights(net, cfg.seed)


def cmd_map(cfg: RunConfig, out=None, connection_list=True, weights_dir=None) -> int:
    out = out or sys.stdout
    net = _load_net(cfg)
    if not cfg.out:
        raise UsageError("--out is required for map")
    report = utilization(net, cfg.core, cfg.scheme, cfg.bias_mode)
    weights = _weights_for(net, cfg, weights_dir)
    placement = map_network(net, weights, cfg.core, cfg.scheme, cfg.bias_mode)
    manifest = export_placement(placement, cfg.out, connection_list=connection_list)
    save_weights(net, weights, os.path.join(cfg.out, "weights"))
    with open(os.path.join(cfg.out, "utilization.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(cfg.out, "utilization.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.format_table() + "\n")
    for name, digest in manifest["sha256"].items():
        log.info("wrote %s sha256=%s", name, digest)
    print(report.format_table(), file=out)
    print(f"total cores: {len(placement.cores)}", file=out)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out=None, placement_dir=None, weights_dir=None) -> int:
    out = out or sys.stdout
    if placement_dir:
        if not os.path.exists(os.path.join(placement_dir, MANIFEST)):
            raise FileNotFoundError(f"no {MANIFEST} in {placement_dir}")
        placement = import_placement(placement_dir)
        net = placement.net
        weights = _weights_for(net, cfg, weights_dir or os.path.join(placement_dir, "weights"))
    else:
        net = _load_net(cfg)
        weights = _weights_for(net, cfg, weights_dir)
        placement = map_network(net, weights, cfg.core, cfg.scheme, cfg.bias_mode)
    rng = _input_rng(cfg.seed)
    inputs = [random_input(net, rng) for _ in range(cfg.inputs)]
    report = verify(placement, weights, inputs, cfg.tolerance)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "verification.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    for l in report.layers:
        print(f"  [{l.layer:2d}] max_abs {l.max_abs:.3e}  max_rel {l.max_rel:.3e}  "
              f"worst_core {l.worst_core:5d}  {'PASS' if l.passed else 'FAIL'}", file=out)
    if report.passed:
        print(f"PASS ({report.inputs} inputs, tolerance {cfg.tolerance:g}, {placement.scheme.value})", file=out)
        return EXIT_OK
    print(f"FAIL: first deviating layer {report.first_failure}", file=out)
    return EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="neuromap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--preset", choices=netir.PRESET_NAMES)
        src.add_argument("--net", metavar="PATH", help="network JSON file")
        p.add_argument("--core", default="256x256", help="core size AxR (axons x neurons)")
        p.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.DIFFERENTIAL.value)
        p.add_argument("--bias-mode", choices=[b.value for b in BiasMode], default=BiasMode.NEURON.value)
        p.add_argument("--tolerance", type=float, default=1e-6)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", metavar="DIR")

    common(sub.add_parser("validate", help="shapes, MAC costs and fan-in against the core"))
    p_map = sub.add_parser("map", help="write placement artifacts and a utilization report")
    common(p_map)
    p_map.add_argument("--weights", metavar="DIR", help="weight directory (default: seeded random)")
    p_map.add_argument("--no-connection-list", action="store_true",
                       help="skip the per-synapse CSV (required for full-size presets)")
    p_ver = sub.add_parser("verify", help="compare mapped inference with the dense reference")
    common(p_ver)
    p_ver.add_argument("--inputs", type=int, default=4, help="number of random inputs")
    p_ver.add_argument("--placement", metavar="DIR", help="verify an exported placement")
    p_ver.add_argument("--weights", metavar="DIR")
    return parser


def _setup_logging():
    level = os.environ.get("NEUROMAP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    try:
        cfg = _config(args)
        log.info("config: %s", cfg)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "map":
            return cmd_map(cfg, connection_list=not args.no_connection_list, weights_dir=args.weights)
        return cmd_verify(cfg, placement_dir=args.placement, weights_dir=args.weights)
    except FanInExceedsCore as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (NeuromapError, UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
