"""Style-conditioned text-to-image diffusion at desk scale."""
from .aca import AugmentPolicy, ContentAdapter, augment_content, gate_aca
from .adaptation import AdaptedProjection, CrossAttention, alpha_scaled, scale_alpha, trainable_parameters
from .backbone import DiffusionConfig, NoiseSchedule, UNet, add_noise
from .checkpoint import FinetuneResidual, applied_residual, load_checkpoint, save_checkpoint
from .model import ModelConfig, StyleDiffusionModel, preset
from .sampler import SampleOptions, cfg_combine, ddim_sample, generate, generate_mixed
from .style_encoder import (
    FeaturePyramid,
    StyleEmbedding,
    average_style_embeddings,
    channel_statistics,
    mix_style_embeddings,
)
from .text import EncodedContext, TextPipeline, Tokenizer
from .trainer import TrainConfig, fast_finetune, read_manifest, train

__all__ = [
    "AdaptedProjection", "AugmentPolicy", "ContentAdapter", "CrossAttention", "DiffusionConfig",
    "EncodedContext", "FeaturePyramid", "FinetuneResidual", "ModelConfig", "NoiseSchedule",
    "SampleOptions", "StyleDiffusionModel", "StyleEmbedding", "TextPipeline", "Tokenizer",
    "TrainConfig", "UNet", "add_noise", "alpha_scaled", "applied_residual", "augment_content",
    "average_style_embeddings", "cfg_combine", "channel_statistics", "ddim_sample", "fast_finetune",
    "gate_aca", "generate", "generate_mixed", "load_checkpoint", "mix_style_embeddings", "preset",
    "read_manifest", "save_checkpoint", "scale_alpha", "train", "trainable_parameters",
]
