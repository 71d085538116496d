"""Two-stream windowed-attention tracking: backbone, heads, losses, tracker,
toy training harness, and a small tape-based autodiff substrate."""

from .tensor import (
    ContractError,
    DivisibilityError,
    GradTape,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    count_macs,
    finite_diff_check,
)

__all__ = [
    "ContractError",
    "DivisibilityError",
    "GradTape",
    "NumericError",
    "ShapeError",
    "Tensor",
    "backward",
    "count_macs",
    "finite_diff_check",
]

__version__ = "0.1.0"
