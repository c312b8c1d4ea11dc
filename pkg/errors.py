"""
Exception hierarchy for the EVS localization pipeline.

Library modules raise these; only the command line front end turns them
into exit codes.
"""


class EvsError(Exception):
    """Base class for all pipeline errors."""


class RejectedInputError(EvsError, ValueError):
    """Input violates a precondition (unsupported order, bad label, bad shape...)."""


class InsufficientDataError(EvsError):
    """Not enough symbols or samples to run an estimator."""


class DegenerateEstimateError(EvsError):
    """The pilot accumulator of a DF symbol is exactly zero."""

    def __init__(self, symbol_index: int):
        super().__init__(f"degenerate RFO estimate: pilot accumulator is zero at DF symbol {symbol_index}")
        self.symbol_index = symbol_index


class SingularEqualizerError(EvsError):
    """A channel estimate is too small to invert."""

    def __init__(self, subcarrier: int, magnitude: float):
        super().__init__(f"singular equalizer: |h_hat| = {magnitude:.3e} at subcarrier {subcarrier}")
        self.subcarrier = subcarrier
        self.magnitude = magnitude


class FeatureKindMismatchError(EvsError, ValueError):
    """Features of one kind were given to a model trained on another."""


class CaptureFormatError(EvsError):
    """Malformed capture file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FeatureFormatError(EvsError):
    """Malformed feature or results file."""
