"""Tensor type, primitive ops and tape-based reverse-mode differentiation."""

from . import ops
from .autodiff import (
    BackwardMode,
    Coefficients,
    Gradient,
    TapeError,
    backward,
    count_passes,
    counters,
    record_forward,
    replay,
)
from .ops import set_debug
from .tape import LAYER_KINDS, Node, Tape, active_tape, no_record
from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = [
    "BackwardMode",
    "Coefficients",
    "Gradient",
    "LAYER_KINDS",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "backward",
    "count_passes",
    "counters",
    "no_record",
    "ops",
    "record_forward",
    "replay",
    "set_debug",
]
