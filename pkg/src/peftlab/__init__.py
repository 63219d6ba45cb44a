"""Desk-scale laboratory for parameter-efficient knowledge transfer.

A numpy-only stack: reverse-mode autodiff (tensor), a small pre-LN
transformer encoder (model), LoRA / soft prompts / bottleneck adapters
with explicit freeze plans (peft), the composite transfer objective
(objective), a synthetic cipher-language task family (corpus), the
training and experiment drivers (trainer), and a CLI (cli).
"""

from .corpus import AugmentationPlan, SplitSpec, Splits, generate_task, synthesize_pseudo
from .model import AdaptedModel, TransformerConfig, encode_feature
from .objective import LossWeights, ThetaSnapshot, alignment_loss, sp_regularizer
from .peft import (
    ConfigError,
    FreezePlan,
    attach_bottleneck,
    attach_lora,
    attach_prompt,
    count_trainable,
    make_freeze_plan,
    merge_lora,
)
from .tensor import Tensor, backward
from .trainer import (
    GRADCHECK_CONFIG,
    NumericalAbort,
    PeftSpec,
    RunConfig,
    augmentation_sweep,
    evaluate,
    gradient_check,
    stability,
    stability_score,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedModel",
    "AugmentationPlan",
    "ConfigError",
    "FreezePlan",
    "GRADCHECK_CONFIG",
    "LossWeights",
    "NumericalAbort",
    "PeftSpec",
    "RunConfig",
    "SplitSpec",
    "Splits",
    "Tensor",
    "ThetaSnapshot",
    "TransformerConfig",
    "alignment_loss",
    "attach_bottleneck",
    "attach_lora",
    "attach_prompt",
    "augmentation_sweep",
    "backward",
    "count_trainable",
    "encode_feature",
    "evaluate",
    "generate_task",
    "gradient_check",
    "make_freeze_plan",
    "merge_lora",
    "sp_regularizer",
    "stability",
    "stability_score",
    "synthesize_pseudo",
    "train",
]
