"""Style-only residual K/V projections inside cross-attention.

Every cross-attention layer projects its context through two
:class:`AdaptedProjection` modules (keys and values).  The frozen base weight
acts on all positions; the low-rank residual, scaled by a learnable ``alpha``,
and the optional finetune vector ``delta_h`` act on style positions only::

    h[i] = W x[i]                                         (text positions)
    h[i] = W x[i] + s * alpha * (x[i] A) B + delta_h      (style positions)

where ``s`` is a runtime multiplier set by :func:`scale_alpha`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator

import torch
from torch import nn


class AdaptedProjection(nn.Module):
    def __init__(self, d_in: int, d_out: int, rank: int = 4, kind: str = "K", bias: bool = False):
        super().__init__()
        if not 1 <= rank <= min(d_in, d_out):
            raise ValueError(f"rank must be in [1, {min(d_in, d_out)}], got {rank}")
        if kind not in ("K", "V"):
            raise ValueError(f"kind must be 'K' or 'V', got {kind!r}")
        self.kind = kind
        self.d_in, self.d_out, self.rank = d_in, d_out, rank
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.delta_down = nn.Parameter(torch.randn(d_in, rank) / math.sqrt(d_in) * 0.1)
        self.delta_up = nn.Parameter(torch.zeros(rank, d_out))
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.alpha_runtime_scale = 1.0
        self.register_parameter("delta_h", None)

    def extra_repr(self) -> str:
        return f"kind={self.kind}, d_in={self.d_in}, d_out={self.d_out}, rank={self.rank}"

    def allocate_delta_h(self) -> nn.Parameter:
        self.delta_h = nn.Parameter(torch.zeros(self.d_out))
        return self.delta_h

    def clear_delta_h(self) -> None:
        self.delta_h = None

    def delta_weight(self) -> torch.Tensor:
        """Materialized low-rank residual, shape (d_in, d_out)."""
        return self.delta_down @ self.delta_up

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Style-pathway residual for every position (masking happens in forward)."""
        r = (self.alpha_runtime_scale * self.alpha) * ((x @ self.delta_down) @ self.delta_up)
        if self.delta_h is not None:
            r = r + self.delta_h
        return r

    def forward(self, x: torch.Tensor, style_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"projection expects width {self.d_in}, got {x.shape[-1]}")
        h = self.base(x)
        if style_mask is None or not bool(style_mask.any()):
            return h
        if style_mask.shape[-1] != x.shape[-2]:
            raise ValueError("style_mask length does not match sequence length")
        # Select, not add-zero: text rows are returned as W x bit-exactly.
        return torch.where(style_mask.unsqueeze(-1), h + self.residual(x), h)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial queries to an (adapted) context."""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 4, rank: int = 4):
        super().__init__()
        if query_dim % heads:
            raise ValueError(f"query_dim {query_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = query_dim // heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = AdaptedProjection(context_dim, query_dim, rank, kind="K")
        self.to_v = AdaptedProjection(context_dim, query_dim, rank, kind="V")
        self.to_out = nn.Linear(query_dim, query_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, queries: torch.Tensor, context: torch.Tensor,
                          style_mask: torch.Tensor | None) -> torch.Tensor:
        q = self._split(self.to_q(queries))
        k = self._split(self.to_k(context, style_mask))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, queries: torch.Tensor, context: torch.Tensor,
                style_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = queries.shape
        attn = self.attention_weights(queries, context, style_mask)
        v = self._split(self.to_v(context, style_mask))
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.to_out(out)


def adapted_projections(model: nn.Module) -> Iterator[tuple[str, AdaptedProjection]]:
    for name, module in model.named_modules():
        if isinstance(module, AdaptedProjection):
            yield name, module


def scale_alpha(model: nn.Module, factor: float) -> None:
    """Set the sampling-time multiplier on every adapted projection's alpha."""
    if factor < 0 or not math.isfinite(factor):
        raise ValueError(f"alpha scale must be a finite non-negative number, got {factor}")
    for _, proj in adapted_projections(model):
        proj.alpha_runtime_scale = float(factor)


@contextlib.contextmanager
def alpha_scaled(model: nn.Module, factor: float):
    previous = {name: p.alpha_runtime_scale for name, p in adapted_projections(model)}
    scale_alpha(model, factor)
    try:
        yield model
    finally:
        for name, p in adapted_projections(model):
            p.alpha_runtime_scale = previous[name]


def trainable_parameters(model: nn.Module, phase: str, lr_encoder_aca: float = 1e-4,
                         lr_explicit: float = 1e-7) -> list[dict]:
    """Optimizer parameter groups for a training phase.

    ``adapter_training``: style-encoder MLPs and the content adapter at
    ``lr_encoder_aca``; low-rank factors and alphas at ``lr_explicit``.
    ``finetuning``: the ``delta_h`` vectors only.  Every other parameter has
    ``requires_grad`` switched off.
    """
    projections = [p for _, p in adapted_projections(model)]
    if phase == "adapter_training":
        enc = list(model.style_encoder.level_mlps.parameters()) + list(model.aca.parameters())
        explicit = [t for p in projections for t in (p.delta_down, p.delta_up, p.alpha)]
        groups = [
            {"name": "encoder_aca", "params": enc, "lr": lr_encoder_aca},
            {"name": "explicit", "params": explicit, "lr": lr_explicit},
        ]
    elif phase == "finetuning":
        if any(p.delta_h is None for p in projections):
            raise RuntimeError("delta_h vectors are not allocated; call allocate_delta_h first")
        groups = [{"name": "delta_h", "params": [p.delta_h for p in projections]}]
    else:
        raise ValueError(f"unknown phase {phase!r}")

    keep = {id(t) for g in groups for t in g["params"]}
    for t in model.parameters():
        t.requires_grad_(id(t) in keep)
    return groups
