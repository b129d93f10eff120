"""Multi-scale vision transformer laboratory for burned-area forecasting.

The package bundles a minimal float64 autodiff engine, asymmetric
tokenization of local / global / index inputs, the transformer model with a
pixel-level linear decoder, a synthetic datacube generator with teleconnected
burn dynamics, a deterministic training loop, exact precision-recall
evaluation, and attention-block analysis.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad
from .gradcheck import grad_check
from .tokenization import (
    TokenizationSpec,
    TokenSet,
    EmbeddedSequence,
    tokenize_local,
    tokenize_global,
    tokenize_indices,
    detokenize,
    embed_sequence,
)
from .model import (
    ModelConfig,
    TeleViTModel,
    encoder_forward,
    decode_cls,
    forward,
    predict_proba,
    parameter_count,
    save_checkpoint,
    load_checkpoint,
)
from .datacube import (
    DataCube,
    Sample,
    SplitSpec,
    coarsen,
    compute_split_stats,
    preprocess,
    build_samples,
    seasonal_cycle_baseline,
    save_cube,
    load_cube,
)
from .synthetic import GeneratorConfig, generate_synthetic_cube
from .training import (
    TrainConfig,
    TrainHistory,
    cross_entropy_loss,
    AdamState,
    adam_step,
    reduce_on_plateau,
    train,
)
from .metrics import PRCurve, pr_curve, auprc, evaluate
from .attention import AttentionReport, extract_attention, export_attention_heatmap

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "grad_check",
    "TokenizationSpec",
    "TokenSet",
    "EmbeddedSequence",
    "tokenize_local",
    "tokenize_global",
    "tokenize_indices",
    "detokenize",
    "embed_sequence",
    "ModelConfig",
    "TeleViTModel",
    "encoder_forward",
    "decode_cls",
    "forward",
    "predict_proba",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "DataCube",
    "Sample",
    "SplitSpec",
    "coarsen",
    "compute_split_stats",
    "preprocess",
    "build_samples",
    "seasonal_cycle_baseline",
    "save_cube",
    "load_cube",
    "GeneratorConfig",
    "generate_synthetic_cube",
    "TrainConfig",
    "TrainHistory",
    "cross_entropy_loss",
    "AdamState",
    "adam_step",
    "reduce_on_plateau",
    "train",
    "PRCurve",
    "pr_curve",
    "auprc",
    "evaluate",
    "AttentionReport",
    "extract_attention",
    "export_attention_heatmap",
]
