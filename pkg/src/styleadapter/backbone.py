"""Pixel-space denoising UNet with cross-attention and the forward noising process.

Timesteps are 0-indexed, ``t in [0, T-1]``; ``alpha_bar[t]`` is the product of
``1 - beta`` over steps ``0..t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .adaptation import CrossAttention
from .errors import ConfigError, ShapeError


@dataclass
class DiffusionConfig:
    image_size: int = 64
    channels: int = 3
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet_widths: tuple[int, ...] = (64, 128, 256, 256)
    context_dim: int = 256
    cross_attention_resolutions: tuple[int, ...] = (16, 8)
    attention_heads: int = 4
    lora_rank: int = 4
    # what the UNet output means: "eps" (noise) or "v" (sqrt(ab)*eps - sqrt(1-ab)*x0); predict_noise always returns noise
    prediction: str = "v"

    def __post_init__(self):
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        self.cross_attention_resolutions = tuple(int(r) for r in self.cross_attention_resolutions)
        if self.prediction not in ("eps", "v"):
            raise ConfigError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")
        if self.channels != 3:
            raise ConfigError("only RGB (channels=3) is supported")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        downs = len(self.unet_widths) - 1
        if downs < 1 or self.image_size % (2 ** downs):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{downs}")
        for w in self.unet_widths:
            if w % self.attention_heads:
                raise ConfigError(f"UNet width {w} not divisible by {self.attention_heads} heads")

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size // 2**i for i in range(len(self.unet_widths)))

    @property
    def deepest_resolution(self) -> int:
        return self.stage_resolutions[-1]

    @property
    def deepest_input_channels(self) -> int:
        return self.unet_widths[-2]

    def betas(self) -> torch.Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.T, dtype=torch.float64)


class NoiseSchedule:
    """Precomputed cumulative products for a linear beta schedule (float64)."""

    def __init__(self, config: DiffusionConfig):
        self.T = config.T
        self.betas = config.betas()
        self.alpha_bars = torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar(self, t: torch.Tensor | int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t >= self.T)).any()):
            raise IndexError(f"timestep out of range [0, {self.T - 1}]: {t.tolist()}")
        return self.alpha_bars[t]


def add_noise(x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor,
              schedule: NoiseSchedule | None = None, alpha_bar: torch.Tensor | float | None = None) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``alpha_bar`` may be passed directly, bypassing the schedule lookup.
    ``t`` is a scalar or one timestep per batch row.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    if alpha_bar is None:
        if schedule is None:
            raise ValueError("need a schedule or an explicit alpha_bar")
        alpha_bar = schedule.alpha_bar(t)
    ab = torch.as_tensor(alpha_bar, dtype=torch.float64)
    if ab.dim() == 1:
        ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    a = ab.sqrt().to(x0.dtype)
    b = (1.0 - ab).sqrt().to(x0.dtype)
    return a * x0 + b * eps


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2, 1):
        if ch % g == 0 and ch // g >= 2 or g == 1:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialCrossAttention(nn.Module):
    """Cross-attention from image positions to the context, then a feed-forward."""

    def __init__(self, ch: int, context_dim: int, heads: int, rank: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.ln1 = nn.LayerNorm(ch)
        self.attn = CrossAttention(ch, context_dim, heads, rank)
        self.ln2 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))

    def forward(self, x: torch.Tensor, context: torch.Tensor, style_mask: torch.Tensor | None) -> torch.Tensor:
        b, c, hgt, wid = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        tokens = tokens + self.attn(self.ln1(tokens), context, style_mask)
        tokens = tokens + self.ff(self.ln2(tokens))
        return x + tokens.transpose(1, 2).reshape(b, c, hgt, wid)


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, attn: bool, cfg: DiffusionConfig):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = SpatialCrossAttention(out_ch, cfg.context_dim, cfg.attention_heads, cfg.lora_rank) if attn else None

    def forward(self, x, temb, context, style_mask):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, context, style_mask)
        return x


class UNet(nn.Module):
    """Noise-prediction UNet: one residual stage per resolution, skip connections,
    cross-attention at the configured resolutions."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.unet_widths
        res = cfg.stage_resolutions
        temb_dim = 4 * widths[0]
        self.temb_dim = widths[0]
        self.time_mlp = nn.Sequential(nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.down.append(Stage(ch, w, temb_dim, res[i] in cfg.cross_attention_resolutions, cfg))
            ch = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = Stage(ch, ch, temb_dim, True, cfg)
        self.mid_res = ResBlock(ch, ch, temb_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up.append(Stage(ch + w, w, temb_dim, res[i] in cfg.cross_attention_resolutions, cfg))
            ch = w
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.channels, 3, padding=1)

    @property
    def deepest_input_shape(self) -> tuple[int, int, int]:
        return (self.cfg.deepest_input_channels, self.cfg.deepest_resolution, self.cfg.deepest_resolution)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor,
                style_mask: torch.Tensor | None = None, aca_features: torch.Tensor | None = None) -> torch.Tensor:
        if context.shape[-1] != self.cfg.context_dim:
            raise ConfigError(f"context width {context.shape[-1]} != context_dim {self.cfg.context_dim}")
        if x.shape[-1] != self.cfg.image_size or x.shape[-2] != self.cfg.image_size:
            raise ShapeError(f"expected {self.cfg.image_size}x{self.cfg.image_size} input, got {tuple(x.shape)}")
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim))
        h = self.conv_in(x)
        skips = []
        last = len(self.down) - 1
        for i, stage in enumerate(self.down):
            if i == last and aca_features is not None:
                if aca_features.shape[1:] != h.shape[1:]:
                    raise ShapeError(f"content features {tuple(aca_features.shape)} do not match "
                                     f"deepest block input {tuple(h.shape)}")
                h = h + aca_features
            h = stage(h, temb, context, style_mask)
            skips.append(h)
            if i < last:
                h = self.downsample[i](h)
        h = self.mid(h, temb, context, style_mask)
        h = self.mid_res(h, temb)
        for j, stage in enumerate(self.up):
            h = stage(torch.cat([h, skips.pop()], dim=1), temb, context, style_mask)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))
