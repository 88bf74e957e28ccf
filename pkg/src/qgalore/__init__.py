"""Quantized low-rank gradient training at desk scale.

INT8 weights updated with stochastic rounding, 4-bit projection matrices
refreshed by a lazily scheduled SVD, and 8-bit Adam moments kept in the
projected subspace.
"""
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .data import TextData, RegressionData, ingest_synthetic, ingest_text, synthetic_corpus
from .linalg import cosine_similarity_flat, matmul, sign_align, svd
from .model import Int8Linear, MLPRegressor, ModelConfig, TinyCharLM, build_model, model_forward_backward
from .optimizer import AdamConfig, AdamState, LowRankAdamState, adam_step, layer_step, lr_schedule
from .quant import (
    QuantizationError,
    QuantizedTensor,
    QuantSpec,
    Rounding,
    apply_update,
    apply_update_sr,
    dequantize,
    pack_int4,
    quantize,
    stochastic_round,
    substream,
    unpack_int4,
)
from .subspace import ProjectionState, Side, compute_projection
from .trainer import (
    DataConfig,
    DivergenceError,
    Method,
    MetricsRecord,
    RunConfig,
    SubspaceConfig,
    Trainer,
    estimate_memory,
    run_training,
)

__version__ = "0.1.0"
