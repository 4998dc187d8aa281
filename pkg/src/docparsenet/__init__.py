"""Multi-modal document field segmentation on a from-scratch numpy autodiff core."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DocParseError,
    DtfFormatError,
    NumericalAbort,
    ShapeError,
)
from .model import FIELDS, DocParseNet, ModelConfig, build, forward, predict_masks
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DocParseError", "DtfFormatError", "NumericalAbort",
    "ShapeError", "FIELDS", "DocParseNet", "ModelConfig", "build", "forward", "predict_masks",
    "Tensor", "backward", "no_grad",
]
