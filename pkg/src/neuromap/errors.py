"""Exception hierarchy shared by every stage of the pipeline."""


class NeuromapError(Exception):
    """Base class for all errors raised by neuromap."""


class InvalidLayer(NeuromapError, ValueError):
    pass


class ShapeMismatch(NeuromapError, ValueError):
    pass


class DegenerateOutput(NeuromapError, ValueError):
    pass


class UnknownPreset(NeuromapError, ValueError):
    pass


class DimensionMismatch(NeuromapError, ValueError):
    pass


class FanInExceedsCore(NeuromapError):
    """A single neuron's inputs do not fit on one core without splitting its weights."""

    def __init__(self, layer_index, fan_in, available, kind=None):
        self.layer_index = layer_index
        self.fan_in = fan_in
        self.available = available
        self.kind = kind
        what = f"layer {layer_index}" + (f" ({kind})" if kind else "")
        super().__init__(f"{what}: fan-in {fan_in} exceeds {available} usable axons")


class CapacityViolation(NeuromapError):
    pass


class ParseError(NeuromapError, ValueError):
    pass


class FormatError(NeuromapError, ValueError):
    pass


class LengthMismatch(NeuromapError, ValueError):
    pass


class MissingActivation(NeuromapError):
    pass
