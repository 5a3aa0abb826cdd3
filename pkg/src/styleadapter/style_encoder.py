"""Multi-level style embedding from channel statistics of a fixed feature network.

Three rectified taps (low, mid, high) are reduced to per-channel mean and
standard deviation; each level's statistics go through that level's own MLP,
which emits ``tokens_per_level`` tokens.  The three token groups are stacked
in the order low, mid, high.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from .errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LEVELS = ("low", "mid", "high")

# relu3_3, relu4_3, relu5_3 inside torchvision's vgg16().features
VGG16_TAPS = (15, 22, 29)


class FeaturePyramid(NamedTuple):
    low: torch.Tensor
    mid: torch.Tensor
    high: torch.Tensor


@dataclass
class StyleEmbedding:
    """Token matrix of shape (3 * tokens_per_level, d), ordered low, mid, high."""

    tokens: torch.Tensor
    source_level_map: dict[str, str] = field(default_factory=dict)
    tokens_per_level: int = 3

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] != 3 * self.tokens_per_level:
            raise ShapeError(f"style tokens must be ({3 * self.tokens_per_level}, d), "
                             f"got {tuple(self.tokens.shape)}")

    def level(self, name: str) -> torch.Tensor:
        i = LEVELS.index(name)
        k = self.tokens_per_level
        return self.tokens[i * k:(i + 1) * k]


def channel_statistics(activation: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Per-channel spatial mean and population std, concatenated as [means; stds].

    Accepts (C, H, W) or (B, C, H, W); returns (2C,) or (B, 2C).
    """
    if activation.dim() not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(activation.shape)}")
    flat = activation.flatten(-2)
    if flat.shape[-1] == 0:
        raise ShapeError("activation has no spatial elements")
    mean = flat.mean(-1)
    var = (flat - mean.unsqueeze(-1)).square().mean(-1)
    std = (var + eps).sqrt()
    return torch.cat([mean, std], dim=-1)


def _vgg_layers(cfg: Sequence[int | str]) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = 3
    for v in cfg:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(ch, int(v), 3, padding=1), nn.ReLU(inplace=False)]
            ch = int(v)
    return nn.Sequential(*layers)


def random_vgg(widths: Sequence[int] = (128, 256, 512), seed: int = 0) -> tuple[nn.Sequential, tuple[int, ...]]:
    """VGG-16-shaped network with fixed-seed random weights.

    Blocks 3-5 have the requested widths; blocks 1-2 use a quarter and a half of
    the first.  Returns the layer stack and the indices of the three taps.
    """
    w0, w1, w2 = widths
    cfg = [w0 // 4, w0 // 4, "M", w0 // 2, w0 // 2, "M", w0, w0, w0, "M", w1, w1, w1, "M", w2, w2, w2]
    gen = torch.Generator().manual_seed(seed)
    net = _vgg_layers(cfg)
    for m in net:
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * 9
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.copy_((torch.rand(m.bias.shape, generator=gen) - 0.5) * 0.1)
    return net, VGG16_TAPS


def pretrained_vgg16(weights_path: str | Path | None = None) -> tuple[nn.Sequential, tuple[int, ...]]:
    """torchvision VGG-16 feature stack truncated after relu5_3.

    ``weights_path`` points at a torchvision ``vgg16`` state dict; without it the
    architecture is returned randomly initialized.
    """
    from torchvision.models import vgg16

    model = vgg16(weights=None)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    return model.features[:VGG16_TAPS[-1] + 1], VGG16_TAPS


class FeatureNetwork(nn.Module):
    """Frozen feature extractor returning the three rectified taps."""

    def __init__(self, layers: nn.Sequential, taps: Sequence[int]):
        super().__init__()
        self.layers = layers
        self.taps = tuple(taps)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Fixed network: never switches to training mode.
        return super().train(False)

    @property
    def tap_channels(self) -> tuple[int, int, int]:
        chans = []
        for i in self.taps:
            conv = [m for m in self.layers[: i + 1] if isinstance(m, nn.Conv2d)][-1]
            chans.append(conv.out_channels)
        return tuple(chans)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an RGB image tensor (.., 3, H, W), got {tuple(image.shape)}")
        x = (image - self.mean) / self.std
        outs = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                outs.append(x)
                if len(outs) == 3:
                    break
        return FeaturePyramid(*outs)


class LevelMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, tokens: int, d: int):
        super().__init__()
        self.tokens, self.d = tokens, d
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, tokens * d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(stats))).view(*stats.shape[:-1], self.tokens, self.d)


def preprocess_style(image: torch.Tensor, size: int) -> torch.Tensor:
    """Resize the shorter side to ``size`` and center-crop a square."""
    image = TF.resize(image, size, antialias=True)
    return TF.center_crop(image, [size, size])


class StyleEncoder(nn.Module):
    def __init__(self, feature_net: FeatureNetwork, context_dim: int, hidden: int = 512,
                 tokens_per_level: int = 3, style_size: int = 256):
        super().__init__()
        self.feature_net = feature_net
        self.context_dim = context_dim
        self.tokens_per_level = tokens_per_level
        self.style_size = style_size
        self.stat_dims = tuple(2 * c for c in feature_net.tap_channels)
        self.level_mlps = nn.ModuleList(
            LevelMLP(n, hidden, tokens_per_level, context_dim) for n in self.stat_dims
        )

    @property
    def num_tokens(self) -> int:
        return 3 * self.tokens_per_level

    @torch.no_grad()
    def extract_multilevel_features(self, image: torch.Tensor) -> FeaturePyramid:
        return self.feature_net(preprocess_style(image, self.style_size))

    @torch.no_grad()
    def image_statistics(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Three StatVectors (one per level) for an image or image batch."""
        pyramid = self.extract_multilevel_features(image)
        return [channel_statistics(a) for a in pyramid]

    def tokens_from_statistics(self, stats: Sequence[torch.Tensor]) -> torch.Tensor:
        """(B, 2C_l) x 3 -> (B, 9, d)."""
        parts = []
        for mlp, s, n in zip(self.level_mlps, stats, self.stat_dims):
            if s.shape[-1] != n:
                raise ConfigError(f"statistics length {s.shape[-1]} != MLP input width {n}")
            parts.append(mlp(s))
        return torch.cat(parts, dim=-2)

    def encode_style(self, image: torch.Tensor, source: str = "") -> StyleEmbedding:
        stats = self.image_statistics(image.unsqueeze(0) if image.dim() == 3 else image[:1])
        tokens = self.tokens_from_statistics(stats)[0]
        return StyleEmbedding(tokens, {lvl: source for lvl in LEVELS}, self.tokens_per_level)


def average_style_embeddings(refs: Sequence[StyleEmbedding]) -> StyleEmbedding:
    if not refs:
        raise ValueError("need at least one style embedding to average")
    shape = refs[0].tokens.shape
    if any(r.tokens.shape != shape for r in refs):
        raise ValueError("style embeddings differ in shape")
    tokens = torch.stack([r.tokens for r in refs]).mean(0)
    sources = {lvl: "+".join(r.source_level_map.get(lvl, "") for r in refs) for lvl in LEVELS}
    return StyleEmbedding(tokens, sources, refs[0].tokens_per_level)


def mix_style_embeddings(low_src: StyleEmbedding, mid_src: StyleEmbedding,
                         high_src: StyleEmbedding) -> StyleEmbedding:
    srcs = (low_src, mid_src, high_src)
    if len({(s.tokens.shape, s.tokens_per_level) for s in srcs}) != 1:
        raise ValueError("style embeddings to mix differ in shape")
    tokens = torch.cat([s.level(lvl) for s, lvl in zip(srcs, LEVELS)], dim=0)
    sources = {lvl: s.source_level_map.get(lvl, "") for s, lvl in zip(srcs, LEVELS)}
    return StyleEmbedding(tokens, sources, low_src.tokens_per_level)
