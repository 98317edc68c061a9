"""Split-learning LSTM toolkit.

Trains a teacher/student forecaster pair, compresses the student
(distillation, magnitude pruning, 8-bit fixed-point quantization),
partitions it at a layer boundary, and runs the halves as an edge and a
server process joined by a binary wire protocol.
"""

__version__ = "0.1.0"

from .model import (
    ModelSpec,
    LayerSpec,
    Parameters,
    LSTMWeights,
    DenseWeights,
    build_student,
    build_teacher,
    search_teacher_dims,
    param_count,
    model_size_kb,
    init_params,
    model_forward,
)

__all__ = [
    "__version__",
    "ModelSpec",
    "LayerSpec",
    "Parameters",
    "LSTMWeights",
    "DenseWeights",
    "build_student",
    "build_teacher",
    "search_teacher_dims",
    "param_count",
    "model_size_kb",
    "init_params",
    "model_forward",
]
