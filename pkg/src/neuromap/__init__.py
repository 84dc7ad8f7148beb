"""Map CNN layers onto fixed-size crossbar cores and check mapped inference against a dense reference."""

from .errors import FanInExceedsCore, NeuromapError
from .mapper import (
    NeuronId,
    Placement,
    build_connectivity,
    export_placement,
    import_placement,
    map_network,
    name_neuron,
    parse_neuron,
)
from .netir import (
    Activation,
    LayerKind,
    LayerSpec,
    NetworkSpec,
    TensorShape,
    complexity,
    infer_shapes,
    mac_cost,
    preset,
)
from .refconv import LayerWeights, random_weights, run_layer, run_network
from .tiler import BiasMode, CoreSpec, Scheme, axon_count, select_tile, utilization
from .xbar import CoreState, core_mvm, run_mapped, split_weights, verify

__version__ = "0.1.0"
