"""Continual few-shot learning with interpolated SGD on a cosine classifier."""

from .errors import (DegenerateImprintError, DivergenceError, InvalidConfigError, InvalidInputError,
                     InvalidLabelError, NumericError, ParseError, SmmclError, StreamIntegrityError,
                     StructuralError)
from .nn_core import CosineClassifierNet, ParamVector
from .strategies import STRATEGIES, AlphaSchedule, TrainConfig, run_stream
from .taskgen import TaskStream, make_blob_stream

__all__ = [
    "AlphaSchedule", "CosineClassifierNet", "DegenerateImprintError", "DivergenceError", "InvalidConfigError",
    "InvalidInputError", "InvalidLabelError", "NumericError", "ParamVector", "ParseError", "STRATEGIES",
    "SmmclError", "StreamIntegrityError", "StructuralError", "TaskStream", "TrainConfig", "make_blob_stream",
    "run_stream",
]
