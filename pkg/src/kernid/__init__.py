"""Kernel-operator identification for compiled DNN binaries.

The package covers the whole pipeline: ingesting corpora of disassembled
functions, learning fused text+structure embeddings, nearest-neighbor
kernel-type matching against a labeled database, and rebuilding/executing
the network from a compiler graph descriptor.
"""

__version__ = "0.1.0"

from kernid.errors import ConfigError, DataError, KernidError, NumericError

__all__ = [
    "ConfigError",
    "DataError",
    "KernidError",
    "NumericError",
    "__version__",
]
