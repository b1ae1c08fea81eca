"""Neighborhood-statistics gradient sparsification with layer-wise dynamic densities.

Includes baseline compressors, byte-exact communication accounting and a
deterministic multi-node data-parallel training simulator.
"""
from .accumulator import AccumulatorState, accumulate, commit_transmitted
from .baselines import (
    CompressorKind,
    QuantizedModelGradient,
    dequantize,
    dgc_sparsify,
    randomk_sparsify,
    sign_quantize,
    topk_sparsify,
)
from .core import (
    EncodingConfig,
    LayerGradient,
    LayerKind,
    LayerSpec,
    ModelGradient,
    PatchPartition,
    SparseLayerGradient,
    SparseModelGradient,
    build_partition,
    densify,
    wire_size_bytes,
)
from .errors import (
    ConfigError,
    DivergedLoss,
    EmptyLedger,
    EmptyModel,
    IndexMismatch,
    NonFinite,
    ShapeMismatch,
)
from .nsi import NsiConfig, PatchScore, keep_count, score_patches, sparsify_layer, sparsify_model
from .schedule import ModelWeights, RatioSchedule, RecomputePolicy, compute_schedule, should_recompute

__version__ = "0.1.0"
