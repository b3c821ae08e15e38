"""Weight-delta analysis and Layer Swap surgery for safetensors checkpoints."""

__version__ = "0.1.0"

from .corpus import (
    CharTokenEstimator,
    FilterVerdict,
    Sample,
    anomaly_filters,
    chunk_text,
    compression_ratio,
    self_reference_filter,
)
from .deltas import (
    DeltaStats,
    accumulate_pair,
    analyze_stack,
    cosine_matrix,
    gram_and_share,
    mean_pairwise_cosine,
)
from .errors import (
    ContainerFormatError,
    DegenerateError,
    ErrorCode,
    IncompatibleError,
    LayerSwapError,
    NoSignalError,
    PreconditionError,
)
from .lid import FidelityReport, LanguageProfile, classify, fidelity, train_profiles
from .surgery import CompatReport, SwapPlan, plan_sweep, swap_layers, validate_compat
from .tensorstore import (
    CheckpointHandle,
    LayerMap,
    TensorMeta,
    group_layers,
    open_checkpoint,
    read_tensor_f64,
    write_checkpoint,
)
