"""Energy disaggregation with an efficient localness transformer.

Seq2point NILM toolkit: a small reverse-mode tensor library, linear global and
windowed local attention, the ELTransformer model, a CSV data pipeline with a
synthetic appliance generator, Adam training with early stopping, NILM
metrics and an attention complexity benchmark.
"""

from eltnilm.errors import (
    ConfigError,
    DataError,
    DimensionError,
    EltError,
    NumericError,
    UsageError,
)
from eltnilm.tensor import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "EltError",
    "NumericError",
    "Tensor",
    "UsageError",
    "backward",
    "finite_diff_check",
    "no_grad",
]
