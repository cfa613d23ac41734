"""Ultra-low-bit integer group quantization with invariance-transform search."""

__version__ = "0.1.0"

from .calibration import CalibSet, load_sequences, split_eval
from .checkpoint import Checkpoint, TensorRecord, read_checkpoint, write_checkpoint
from .errors import (
    CorruptionError,
    DomainError,
    FormatError,
    IvqError,
    ParseError,
    ShapeError,
    TokenRangeError,
)
from .invariance import (
    LayerTransform,
    apply_permutation,
    apply_rotation,
    apply_scaling,
    apply_transformation,
    identity_transform,
    rotation_deviation,
)
from .model import (
    ActivationTrace,
    HyperParams,
    ModelParams,
    corpus_cross_entropy,
    evaluate,
    ffn_block,
    forward,
    from_checkpoint,
    perplexity,
    quantize_params,
    random_params,
    to_checkpoint,
)
from .numerics import Matrix, RandomSource, matmul, mse, relu, softmax_cross_entropy
from .quantizer import (
    QuantSpec,
    QuantizedMatrix,
    dequantize_group,
    dequantize_matrix,
    fake_quantize_matrix,
    fit_group_params,
    quantize_group,
    quantize_matrix,
)
from .search import SearchConfig, SearchResult, SearchState, objective, propose, run, step
