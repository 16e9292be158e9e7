"""Streaming attention kernel laboratory.

Four interchangeable formulations of single-query streaming attention, a
reduced-precision emulation layer, piecewise-linear nonlinearity tables,
semantic op counting, and a deterministic tensor file format, all wired
behind one CLI.
"""

from .precision import FP64, BF16, FP8E4M3, Precision, get_format, round_to_format
from .kernels import (
    AttnProblem,
    SkipConfig,
    KERNEL_KINDS,
    run_kernel,
)
from .instrumentation import OpCounts, SkipStats, ErrorReport, compare_outputs

__version__ = "0.1.0"

__all__ = [
    "FP64",
    "BF16",
    "FP8E4M3",
    "Precision",
    "get_format",
    "round_to_format",
    "AttnProblem",
    "SkipConfig",
    "KERNEL_KINDS",
    "run_kernel",
    "OpCounts",
    "SkipStats",
    "ErrorReport",
    "compare_outputs",
    "__version__",
]
