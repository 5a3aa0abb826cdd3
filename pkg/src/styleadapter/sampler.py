"""DDIM sampling with classifier-free guidance and end-to-end generation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .adaptation import alpha_scaled
from .checkpoint import FinetuneResidual, applied_residual
from .errors import NumericError, ShapeError
from .model import StyleDiffusionModel
from .style_encoder import LEVELS, StyleEmbedding, average_style_embeddings, mix_style_embeddings
from .text import EncodedContext
from .utils import ParameterAccessTracker, file_sha256, fixed_num_threads, load_image, to_uint8

PNG_METADATA_KEY = "styleadapter"


@dataclass
class SampleOptions:
    steps: int = 50
    cfg_scale: float = 9.0
    seed: int = 0
    alpha_scale: float = 1.0
    eta: float = 0.0
    # intra-op threads while sampling; pinned so output does not depend on the caller's setting
    threads: int | None = 1
    clip_x0: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.alpha_scale < 0:
            raise ValueError("alpha_scale must be >= 0")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1 or None")


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance inputs differ in shape: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps starting at T-1; e.g. 999, 979, ..., 19."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    return [int(round(T - i * T / steps)) - 1 for i in range(steps)]


@torch.no_grad()
def ddim_sample(model: StyleDiffusionModel, context: EncodedContext, opts: SampleOptions,
                uncond: EncodedContext | None = None) -> torch.Tensor:
    """Denoise from seeded Gaussian noise; returns images in [0, 1], (B, 3, H, W).

    Each step runs the conditional and unconditional branches separately and
    mixes them with :func:`cfg_combine`.  The content adapter is never used.
    """
    cfg = model.cfg.diffusion
    b = context.hidden.shape[0]
    if uncond is None:
        uncond = model.encode([""] * b)
    gen = torch.Generator().manual_seed(opts.seed)
    x = torch.randn((b, cfg.channels, cfg.image_size, cfg.image_size), generator=gen)
    alpha_bars = model.schedule.alpha_bars
    ts = ddim_timesteps(cfg.T, opts.steps)
    for i, t in enumerate(ts):
        ab = alpha_bars[t].item()
        ab_prev = alpha_bars[ts[i + 1]].item() if i + 1 < len(ts) else 1.0
        eps_c = model.predict_noise(x, t, context)
        if opts.cfg_scale == 1.0:
            eps = eps_c
        else:
            eps = cfg_combine(eps_c, model.predict_noise(x, t, uncond), opts.cfg_scale)
        x0 = (x - (1 - ab) ** 0.5 * eps) / ab ** 0.5
        if opts.clip_x0:
            # keep eps consistent with the clamped x0, else the clipped excess is pushed back into x
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - ab**0.5 * x0) / (1 - ab) ** 0.5
        sigma = opts.eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)) ** 0.5
        x = ab_prev ** 0.5 * x0 + max(1 - ab_prev - sigma**2, 0.0) ** 0.5 * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=gen)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite sample at step {i} (t={t})")
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def image_id(ref: str | Path | torch.Tensor) -> str:
    if isinstance(ref, torch.Tensor):
        return "tensor:" + hashlib.sha256(ref.detach().contiguous().numpy().tobytes()).hexdigest()[:16]
    return file_sha256(ref)[:16]


def _as_image(ref: str | Path | torch.Tensor) -> torch.Tensor:
    return ref if isinstance(ref, torch.Tensor) else load_image(ref)


def encode_reference(model: StyleDiffusionModel, ref: str | Path | torch.Tensor) -> StyleEmbedding:
    with torch.no_grad():
        return model.style_encoder.encode_style(_as_image(ref), source=image_id(ref))


def generate_from_embedding(model: StyleDiffusionModel, prompt: str, embedding: StyleEmbedding | None,
                            opts: SampleOptions | None = None,
                            residual: FinetuneResidual | None = None) -> torch.Tensor:
    """Sample one image (3, H, W) in [0, 1] from a prompt and optional style embedding."""
    opts = opts or SampleOptions()
    with ParameterAccessTracker(model.aca.parameters()) as tracker, fixed_num_threads(opts.threads), \
            applied_residual(model, residual), alpha_scaled(model, opts.alpha_scale), torch.no_grad():
        tokens = None if embedding is None else embedding.tokens.unsqueeze(0)
        context = model.encode([prompt], tokens)
        image = ddim_sample(model, context, opts)[0]
    if tracker.reads:
        raise AssertionError(f"content adapter parameters were read {tracker.reads} times during sampling")
    return image


def _metadata(prompt: str, opts: SampleOptions, **extra) -> dict:
    return {"prompt": prompt, "options": asdict(opts), **extra}


def save_png(image: torch.Tensor, path: str | Path, metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    info.add_text(PNG_METADATA_KEY, json.dumps(metadata, sort_keys=True))
    Image.fromarray(to_uint8(image), "RGB").save(path, pnginfo=info)
    return path


def read_png_metadata(path: str | Path) -> dict:
    with Image.open(path) as img:
        return json.loads(img.text[PNG_METADATA_KEY])


def generate(model: StyleDiffusionModel, prompt: str, style_images: Sequence[str | Path | torch.Tensor] = (),
             residual: FinetuneResidual | None = None, opts: SampleOptions | None = None,
             out_path: str | Path | None = None) -> tuple[torch.Tensor, dict]:
    """Generate from zero, one, or several style references (averaged)."""
    opts = opts or SampleOptions()
    embedding = None
    if style_images:
        embs = [encode_reference(model, ref) for ref in style_images]
        embedding = embs[0] if len(embs) == 1 else average_style_embeddings(embs)
    image = generate_from_embedding(model, prompt, embedding, opts, residual)
    meta = _metadata(prompt, opts, style_refs=[image_id(r) for r in style_images],
                     residual=None if residual is None else residual.meta.get("style_refs", []))
    if out_path is not None:
        save_png(image, out_path, meta)
    return image, meta


def generate_mixed(model: StyleDiffusionModel, prompt: str, low_img, mid_img, high_img,
                   opts: SampleOptions | None = None, residual: FinetuneResidual | None = None,
                   force_residual: bool = False, out_path: str | Path | None = None) -> tuple[torch.Tensor, dict]:
    """Generate with low/mid/high style levels taken from three references.

    A residual is per projection, not per level, so it is applied only when
    every level's source is one of the residual's references (or when forced).
    """
    opts = opts or SampleOptions()
    embs = [encode_reference(model, r) for r in (low_img, mid_img, high_img)]
    mixed = mix_style_embeddings(*embs)
    sources = [e.source_level_map[lvl] for e, lvl in zip(embs, LEVELS)]
    use_residual = None
    if residual is not None:
        refs = set(residual.meta.get("style_refs", []))
        if force_residual or all(s in refs for s in sources):
            use_residual = residual
    image = generate_from_embedding(model, prompt, mixed, opts, use_residual)
    meta = _metadata(prompt, opts, provenance=dict(zip(LEVELS, sources)),
                     residual_applied=use_residual is not None)
    if out_path is not None:
        save_png(image, out_path, meta)
    return image, meta
