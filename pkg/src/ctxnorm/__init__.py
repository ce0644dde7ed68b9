"""Context-aware normalization layers with exact backward kernels.

Implements Context Normalization (batch statistics per predefined context),
its extended variant (trainable context statistics), and the adaptive
variant (latent contexts via a learnable diagonal Gaussian mixture),
alongside the BatchNorm / LayerNorm / ModeNorm / MixNorm baselines, the
context-construction utilities, and a desk-scale training harness and CLI
for convergence comparisons.
"""

from .context_norms import (
    AdaptiveContextNorm,
    ContextNorm,
    ContextNormExtended,
    load_state,
    save_state,
)
from .contexts import (
    ContextAssignment,
    assign_contexts,
    context_proportions,
    kmeans_fit,
    nearest_centroid,
)
from .datasets import Dataset, gen_synthetic_gmm, load_csv_dataset, load_mnist_idx
from .gmm import GmmParams, em_fit, em_step, gaussian_logpdf, posteriors, weighted_moments
from .nn import Model, ModelSpec, build_model, cnn_spec, mlp_spec
from .norms import BatchNorm, LayerNorm, MixNorm, ModeNorm, NotInitializedError
from .optim import Adam, SgdMomentum, make_optimizer, make_schedule
from .rng import make_rng, spawn_rngs
from .tensor_ops import finite_diff_grad, masked_moments, tensor_create
from .train import (
    DivergenceError,
    MetricLog,
    TrainConfig,
    backward_and_step,
    evaluate,
    forward_loss,
    macro_metrics,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveContextNorm",
    "Adam",
    "BatchNorm",
    "ContextAssignment",
    "ContextNorm",
    "ContextNormExtended",
    "Dataset",
    "DivergenceError",
    "GmmParams",
    "LayerNorm",
    "MetricLog",
    "MixNorm",
    "Model",
    "ModelSpec",
    "ModeNorm",
    "NotInitializedError",
    "SgdMomentum",
    "TrainConfig",
    "assign_contexts",
    "backward_and_step",
    "build_model",
    "cnn_spec",
    "context_proportions",
    "em_fit",
    "em_step",
    "evaluate",
    "finite_diff_grad",
    "forward_loss",
    "gaussian_logpdf",
    "gen_synthetic_gmm",
    "kmeans_fit",
    "load_csv_dataset",
    "load_mnist_idx",
    "load_state",
    "macro_metrics",
    "make_optimizer",
    "make_rng",
    "make_schedule",
    "masked_moments",
    "mlp_spec",
    "nearest_centroid",
    "posteriors",
    "save_state",
    "spawn_rngs",
    "tensor_create",
    "train",
    "weighted_moments",
]
