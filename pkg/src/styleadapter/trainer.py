"""Manifest ingestion, base-stack pretraining, adapter training, and fast finetuning."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .aca import AugmentPolicy, augment_content, gate_aca
from .adaptation import adapted_projections, trainable_parameters
from .backbone import add_noise
from .checkpoint import FinetuneResidual, save_checkpoint, section_hashes
from .errors import NumericError
from .model import ModelConfig, StyleDiffusionModel, preset
from .style_encoder import average_style_embeddings
from .text import Tokenizer
from .utils import load_image

log = logging.getLogger(__name__)


LOSS_WEIGHTINGS = ("none", "min-snr", "v")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_encoder_aca: float = 1e-4
    lr_explicit: float = 1e-7
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    max_steps: int = 2000
    seed: int = 0
    cfg_dropout_probability: float = 0.1
    pretrain_steps: int = 2000
    pretrain_lr: float = 2e-4
    # per-sample loss weighting for base pretraining only; adapter training is always plain noise MSE
    pretrain_weighting: str = "v"
    pretrain_snr_gamma: float = 5.0
    checkpoint_every: int = 0
    log_every: int = 50
    preset: str = "default"
    model: dict = field(default_factory=dict)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        self.adam_betas = tuple(self.adam_betas)
        if self.lr_encoder_aca <= 0 or self.lr_explicit <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pretrain_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"pretrain_weighting must be one of {LOSS_WEIGHTINGS}")
        if self.pretrain_snr_gamma <= 0:
            raise ValueError("pretrain_snr_gamma must be positive")
        if not 0.0 <= self.cfg_dropout_probability <= 1.0:
            raise ValueError("cfg_dropout_probability must be in [0, 1]")

    def model_config(self) -> ModelConfig:
        return preset(self.preset, **self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class Record:
    image_path: Path
    caption: str


class ManifestError(ValueError):
    pass


def read_manifest(path: str | Path) -> list[Record]:
    """Line-delimited JSON records ``{"image_path": ..., "caption": ...}``.

    Relative paths resolve against the manifest's directory.  An empty caption
    falls back to the file stem.  All problems are reported together.
    """
    path = Path(path)
    records, problems = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            img = Path(obj["image_path"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            problems.append(f"line {lineno}: malformed record ({exc})")
            continue
        img = img if img.is_absolute() else path.parent / img
        if not img.is_file():
            problems.append(f"line {lineno}: missing image {img}")
            continue
        caption = str(obj.get("caption") or "").strip() or img.stem.replace("_", " ")
        records.append(Record(img, caption))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems[:10]))
    if not records:
        raise ManifestError(f"{path}: no records")
    return records


class TrainingData:
    """Images at model resolution plus cached style statistics (the feature
    network is fixed, so statistics never change)."""

    def __init__(self, records: Sequence[Record], model: StyleDiffusionModel, chunk: int = 16):
        self.records = list(records)
        self.captions = [r.caption for r in self.records]
        size = model.cfg.diffusion.image_size
        self.images = torch.stack([load_image(r.image_path, size) for r in self.records])
        per_level: list[list[torch.Tensor]] = [[], [], []]
        for start in range(0, len(self.records), chunk):
            batch = [load_image(r.image_path) for r in self.records[start:start + chunk]]
            stats = [model.style_encoder.image_statistics(im) for im in batch]
            for lvl in range(3):
                per_level[lvl].append(torch.cat([s[lvl] for s in stats]))
        self.stats = [torch.cat(p) for p in per_level]

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: torch.Tensor):
        return (self.images[idx], [s[idx] for s in self.stats], [self.captions[i] for i in idx.tolist()])


def diffusion_loss(model: StyleDiffusionModel, images: torch.Tensor, captions: Sequence[str],
                   gen: torch.Generator, style_tokens: torch.Tensor | None = None,
                   drop: torch.Tensor | None = None, policy: AugmentPolicy | None = None,
                   use_aca: bool = True, weighting: str = "none", snr_gamma: float = 5.0) -> torch.Tensor:
    """Noise-prediction MSE for one batch.

    ``style_tokens`` (B, 9, d) condition the rows not flagged in ``drop``;
    dropped rows use the unconditional context (empty prompt, no style).  The
    content adapter sees the color-augmented clean image on gated rows.
    ``weighting`` scales each sample's noise MSE: ``"none"``; ``"min-snr"``,
    ``min(snr, snr_gamma) / snr``; or ``"v"``, ``1 / alpha_bar``, which equals
    the MSE on the velocity target and keeps high-noise steps from being ignored.
    """
    b = images.shape[0]
    T = model.cfg.diffusion.T
    x0 = images * 2.0 - 1.0
    t = torch.randint(0, T, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = add_noise(x0, t, eps, model.schedule)
    if drop is None:
        drop = torch.zeros(b, dtype=torch.bool)

    aca = None
    if use_aca:
        gate = gate_aca(t, T, model.cfg.aca_fraction)
        if bool(gate.any()):
            feats = model.aca(augment_content(images[gate], policy or AugmentPolicy(), gen))
            aca = torch.zeros(b, *feats.shape[1:], dtype=feats.dtype).index_put((gate.nonzero()[:, 0],), feats)

    pred = torch.empty_like(eps)
    keep = ~drop
    for rows, conditional in ((keep, True), (drop, False)):
        if not bool(rows.any()):
            continue
        idx = rows.nonzero()[:, 0]
        if conditional:
            ctx = model.encode([captions[i] for i in idx.tolist()],
                               None if style_tokens is None else style_tokens[idx])
        else:
            ctx = model.encode([""] * len(idx))
        pred = pred.index_put((idx,), model.predict_noise(x_t[idx], t[idx], ctx, None if aca is None else aca[idx]))
    if weighting == "none":
        return F.mse_loss(pred, eps)
    ab = model.schedule.alpha_bars[t]
    if weighting == "v":
        weight = (1.0 / ab).to(pred.dtype)
    elif weighting == "min-snr":
        snr = ab / (1.0 - ab)
        weight = (snr.clamp(max=snr_gamma) / snr).to(pred.dtype)
    else:
        raise ValueError(f"unknown loss weighting {weighting!r}")
    return (weight * (pred - eps).square().mean(dim=(1, 2, 3))).mean()


def _check_finite(loss: torch.Tensor, step: int, phase: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"{phase} step {step}: non-finite loss {loss.item()}")


def training_step(model: StyleDiffusionModel, data: TrainingData, idx: torch.Tensor,
                  optimizer: torch.optim.Optimizer, cfg: TrainConfig, gen: torch.Generator) -> float:
    """One adapter-training step: the training image is its own style reference."""
    images, stats, captions = data.batch(idx)
    drop = torch.rand(len(idx), generator=gen) < cfg.cfg_dropout_probability
    style_tokens = model.style_encoder.tokens_from_statistics(stats)
    loss = diffusion_loss(model, images, captions, gen, style_tokens, drop, cfg.augment)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def pretrain_step(model: StyleDiffusionModel, data: TrainingData, idx: torch.Tensor,
                  optimizer: torch.optim.Optimizer, cfg: TrainConfig, gen: torch.Generator) -> float:
    """Base-stack step: text-only conditioning, no style tokens, no content adapter."""
    images, _, captions = data.batch(idx)
    drop = torch.rand(len(idx), generator=gen) < cfg.cfg_dropout_probability
    loss = diffusion_loss(model, images, captions, gen, None, drop, use_aca=False,
                          weighting=cfg.pretrain_weighting, snr_gamma=cfg.pretrain_snr_gamma)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def base_parameters(model: StyleDiffusionModel) -> list[nn.Parameter]:
    adapter = {id(t) for _, p in adapted_projections(model) for t in (p.delta_down, p.delta_up, p.alpha)}
    params = [p for p in list(model.unet.parameters()) + list(model.text.parameters()) if id(p) not in adapter]
    keep = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)
    return params


def _write_curve(path: Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(rows)


def _loop(name: str, steps: int, step_fn: Callable[[int], float], log_every: int,
          on_step: Callable[[int], None] | None = None) -> list[tuple[int, float]]:
    curve = []
    for step in range(1, steps + 1):
        loss = step_fn(step)
        if not math.isfinite(loss):
            raise NumericError(f"{name} step {step}: non-finite loss {loss}")
        curve.append((step, loss))
        if log_every and step % log_every == 0:
            recent = [l for _, l in curve[-log_every:]]
            log.info("%s step %d/%d loss %.5f", name, step, steps, sum(recent) / len(recent))
        if on_step is not None:
            on_step(step)
    return curve


def pretrain_base(model: StyleDiffusionModel, data: TrainingData, cfg: TrainConfig,
                  gen: torch.Generator) -> list[tuple[int, float]]:
    model.train()
    opt = torch.optim.AdamW(base_parameters(model), lr=cfg.pretrain_lr, betas=cfg.adam_betas,
                            weight_decay=cfg.weight_decay)
    return _loop("pretrain", cfg.pretrain_steps,
                 lambda s: pretrain_step(model, data, torch.randint(0, len(data), (cfg.batch_size,), generator=gen),
                                         opt, cfg, gen), cfg.log_every)


def adapter_optimizer(model: StyleDiffusionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = trainable_parameters(model, "adapter_training", cfg.lr_encoder_aca, cfg.lr_explicit)
    return torch.optim.AdamW(groups, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)


def build_model(cfg: TrainConfig, captions: Sequence[str]) -> StyleDiffusionModel:
    mcfg = cfg.model_config()
    torch.manual_seed(cfg.seed)
    return StyleDiffusionModel(mcfg, Tokenizer.from_captions(captions, mcfg.max_text_tokens))


def train(cfg: TrainConfig, manifest: str | Path | Sequence[Record], out_dir: str | Path | None = None,
          base: StyleDiffusionModel | None = None) -> tuple[StyleDiffusionModel, dict]:
    """Pretrain the base stack (unless ``base`` is given), freeze it, then train
    the style encoder MLPs, content adapter and explicit-adaptation factors.

    Returns the model and a summary dict with both loss curves and section
    hashes before/after adapter training.
    """
    records = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = base if base is not None else build_model(cfg, [r.caption for r in records])
    gen = torch.Generator().manual_seed(cfg.seed)
    data = TrainingData(records, model)

    pre_curve: list[tuple[int, float]] = []
    if base is None and cfg.pretrain_steps > 0:
        pre_curve = pretrain_base(model, data, cfg, gen)
        if out is not None:
            _write_curve(out / "pretrain_loss.csv", pre_curve)

    model.train()
    opt = adapter_optimizer(model, cfg)
    hashes_before = section_hashes(model)

    def checkpoint(step: int) -> None:
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"step_{step:06d}.ckpt", {"step": step, "seed": cfg.seed,
                                                                  "config_hash": cfg.digest()})

    curve = _loop("adapter", cfg.max_steps,
                  lambda s: training_step(model, data, torch.randint(0, len(data), (cfg.batch_size,), generator=gen),
                                          opt, cfg, gen), cfg.log_every, checkpoint)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    summary = {"pretrain_curve": pre_curve, "curve": curve, "hashes_before": hashes_before,
               "hashes_after": section_hashes(model), "config": cfg.to_dict()}
    if out is not None:
        _write_curve(out / "loss.csv", curve)
        save_checkpoint(model, out / "final.ckpt", {"step": cfg.max_steps, "seed": cfg.seed,
                                                     "config_hash": cfg.digest(),
                                                     "pretrain_steps": len(pre_curve)})
    return model, summary


def fast_finetune(model: StyleDiffusionModel, style_images: Sequence[torch.Tensor], steps: int = 25,
                  lr: float = 0.02, seed: int = 0, batch_size: int = 4, caption: str = "",
                  policy: AugmentPolicy | None = None, sources: Sequence[str] = ()) -> FinetuneResidual:
    """Optimize one ``delta_h`` vector per adapted projection on the references.

    ``style_images`` are (3, H, W) tensors in [0, 1] at any resolution.  The
    style embedding is the average over references; each step draws a batch
    cycling through the references at model resolution.  The model is left
    unchanged (the vectors are removed after optimization).
    """
    if not style_images:
        raise ValueError("fast_finetune needs at least one style reference")
    if steps < 1 or lr <= 0:
        raise ValueError("steps must be >= 1 and lr > 0")
    import torchvision.transforms.functional as TF

    size = model.cfg.diffusion.image_size
    with torch.no_grad():
        emb = average_style_embeddings([model.style_encoder.encode_style(im) for im in style_images])
        targets = torch.stack([TF.center_crop(TF.resize(im, size, antialias=True), [size, size])
                               for im in style_images])
    rows = torch.arange(batch_size) % len(style_images)
    batch_images = targets[rows]
    tokens = emb.tokens.unsqueeze(0).expand(batch_size, -1, -1)

    projections = [p for _, p in adapted_projections(model)]
    saved_grad = {id(p): p.requires_grad for p in model.parameters()}
    for p in projections:
        p.allocate_delta_h()
    try:
        groups = trainable_parameters(model, "finetuning")
        opt = torch.optim.AdamW(groups, lr=lr, weight_decay=0.0)
        gen = torch.Generator().manual_seed(seed)
        model.eval()

        def step_fn(step: int) -> float:
            loss = diffusion_loss(model, batch_images, [caption] * batch_size, gen, tokens, None,
                                  policy or AugmentPolicy())
            _check_finite(loss, step, "finetune")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            return loss.item()

        curve = _loop("finetune", steps, step_fn, 0)
        vectors = {name: p.delta_h.detach().clone() for name, p in adapted_projections(model)}
    finally:
        for p in projections:
            p.clear_delta_h()
        for p in model.parameters():
            p.requires_grad_(saved_grad.get(id(p), False))
    meta = {"steps": steps, "lr": lr, "seed": seed, "batch_size": batch_size, "caption": caption,
            "style_refs": list(sources), "optimizer_steps": len(curve), "loss_curve": curve}
    return FinetuneResidual(vectors, meta)
