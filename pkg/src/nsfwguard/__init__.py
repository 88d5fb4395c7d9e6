"""Multimodal content-safety toolkit: dataset pipeline, cross-attention
fusion classifier, budgeted attacks, ASR benchmark, and moderation gateway."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    Label,
    LabeledSample,
    Manifest,
    PerturbedModality,
    Source,
    Split,
    load_manifest,
    split_dataset,
    validate_sample,
    write_manifest,
)
from .model import ModelConfig, ModelParams, init_params, load_model, save_model  # noqa: F401
from .trainer import MetricReport, TrainConfig, evaluate_metrics, train  # noqa: F401
