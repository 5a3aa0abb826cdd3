"""Model assembly: backbone, text pipeline, style encoder and content adapter."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from .aca import ContentAdapter
from .backbone import DiffusionConfig, NoiseSchedule, UNet
from .errors import ConfigError
from .style_encoder import FeatureNetwork, StyleEncoder, pretrained_vgg16, random_vgg
from .text import EncodedContext, TextPipeline, Tokenizer


@dataclass
class ModelConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    max_text_tokens: int = 68
    text_layers: int = 4
    text_heads: int = 4
    feature_net: str = "random-vgg"  # or "vgg16"
    feature_widths: tuple[int, int, int] = (128, 256, 512)
    feature_seed: int = 0
    vgg_weights: str | None = None
    style_size: int = 256
    style_hidden: int = 512
    tokens_per_level: int = 3
    aca_width: int = 32
    aca_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.diffusion, dict):
            self.diffusion = DiffusionConfig(**self.diffusion)
        self.feature_widths = tuple(self.feature_widths)
        if self.feature_net not in ("random-vgg", "vgg16"):
            raise ConfigError(f"unknown feature_net {self.feature_net!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


PRESETS = {
    # Full desk-scale configuration.
    "default": {},
    # CPU smoke-training configuration (64x64 images, narrower stack).
    "smoke": dict(
        diffusion=dict(unet_widths=(32, 64, 64, 64), context_dim=64),
        feature_widths=(64, 128, 256), style_size=128, style_hidden=256, aca_width=16,
    ),
    # Unit-test configuration.
    "tiny": dict(
        diffusion=dict(image_size=16, unet_widths=(8, 16, 16, 16), context_dim=16,
                       cross_attention_resolutions=(4, 2), attention_heads=2, lora_rank=2),
        max_text_tokens=12, text_layers=1, text_heads=2, feature_widths=(8, 16, 16),
        style_size=32, style_hidden=32, aca_width=4,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[name].items()}
    for k, v in overrides.items():
        if k == "diffusion":
            data.setdefault("diffusion", {}).update(v)
        else:
            data[k] = v
    return ModelConfig(**data)


def build_feature_network(cfg: ModelConfig) -> FeatureNetwork:
    if cfg.feature_net == "vgg16":
        layers, taps = pretrained_vgg16(cfg.vgg_weights)
    else:
        layers, taps = random_vgg(cfg.feature_widths, cfg.feature_seed)
    return FeatureNetwork(layers, taps)


class StyleDiffusionModel(nn.Module):
    """The full conditioning stack around a noise-prediction UNet."""

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        if tokenizer.max_text_tokens != cfg.max_text_tokens:
            raise ConfigError("tokenizer max_text_tokens differs from model config")
        self.cfg = cfg
        dcfg = cfg.diffusion
        self.schedule = NoiseSchedule(dcfg)
        self.unet = UNet(dcfg)
        self.text = TextPipeline(tokenizer, dcfg.context_dim, cfg.text_layers, cfg.text_heads,
                                 n_style=3 * cfg.tokens_per_level)
        self.style_encoder = StyleEncoder(build_feature_network(cfg), dcfg.context_dim, cfg.style_hidden,
                                          cfg.tokens_per_level, cfg.style_size)
        self.aca = ContentAdapter(dcfg.image_size, self.unet.deepest_input_shape, cfg.aca_width)

    @property
    def tokenizer(self) -> Tokenizer:
        return self.text.tokenizer

    def encode(self, prompts: Sequence[str], style_tokens: torch.Tensor | None = None) -> EncodedContext:
        return self.text.encode_prompts(prompts, style_tokens)

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor | int, context: EncodedContext,
                      aca: torch.Tensor | None = None) -> torch.Tensor:
        """Noise estimate for ``x_t``; ``aca`` is an already-gated content feature map."""
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        out = self.unet(x_t, t, context.hidden, context.style_mask, aca)
        if self.cfg.diffusion.prediction == "eps":
            return out
        # v output: eps = sqrt(ab) * v + sqrt(1 - ab) * x_t, so high-noise steps pass x_t through exactly
        ab = self.schedule.alpha_bar(t).to(out.dtype)[:, None, None, None]
        return ab.sqrt() * out + (1.0 - ab).sqrt() * x_t

    def sections(self) -> dict[str, list[tuple[str, torch.Tensor]]]:
        """Named-parameter groups used for hashing and freeze checks."""
        adapter_names = ("delta_down", "delta_up", "alpha", "delta_h")
        out: dict[str, list] = {"backbone_frozen": [], "adapters": [], "text": [], "feature_net": [],
                                "style_mlps": [], "aca": []}
        for name, p in self.named_parameters():
            if name.startswith("unet."):
                key = "adapters" if name.rsplit(".", 1)[-1] in adapter_names else "backbone_frozen"
            elif name.startswith("text."):
                key = "text"
            elif name.startswith("style_encoder.feature_net."):
                key = "feature_net"
            elif name.startswith("style_encoder."):
                key = "style_mlps"
            else:
                key = "aca"
            out[key].append((name, p))
        return out
