"""Checkpoint and finetune-residual archives."""
from __future__ import annotations

import contextlib
import io
import pickle
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .adaptation import adapted_projections
from .errors import IntegrityError
from .model import ModelConfig, StyleDiffusionModel
from .text import Tokenizer
from .utils import hash_tensors

CHECKPOINT_FORMAT = "styleadapter-checkpoint"
CHECKPOINT_VERSION = 1
RESIDUAL_FORMAT = "styleadapter-residual"
RESIDUAL_VERSION = 1


def section_hashes(model: StyleDiffusionModel) -> dict[str, str]:
    return {name: hash_tensors(params) for name, params in model.sections().items()}


def _state_without_residuals(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items() if not k.endswith(".delta_h")}


def save_checkpoint(model: StyleDiffusionModel, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    residuals = {n: p.delta_h for n, p in adapted_projections(model)}
    for _, p in adapted_projections(model):
        p.delta_h = None
    try:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.cfg.to_dict(),
            "vocab": model.tokenizer.to_list(),
            "state": _state_without_residuals(model),
            "hashes": section_hashes(model),
            "meta": dict(meta or {}),
        }
    finally:
        for n, p in adapted_projections(model):
            p.delta_h = residuals[n]
    torch.save(payload, path)
    return path


def _read(path: Path, kind: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, OSError, ValueError) as exc:
        raise IntegrityError(f"{path}: unreadable {kind} archive ({exc})") from exc
    if not isinstance(payload, dict):
        raise IntegrityError(f"{path}: not a {kind} archive")
    return payload


def load_checkpoint(path: str | Path) -> tuple[StyleDiffusionModel, dict]:
    """Rebuild the model from an archive; returns (model, meta)."""
    path = Path(path)
    payload = _read(path, "checkpoint")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a checkpoint archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {payload.get('version')} "
                             f"!= supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    tokenizer = Tokenizer(payload["vocab"], cfg.max_text_tokens)
    model = StyleDiffusionModel(cfg, tokenizer)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise IntegrityError(f"{path}: parameters do not match the stored config ({exc})") from exc
    actual = section_hashes(model)
    bad = sorted(k for k, v in payload["hashes"].items() if actual.get(k) != v)
    if bad:
        raise IntegrityError(f"{path}: hash mismatch in sections {bad}")
    model.eval()
    return model, payload["meta"]


@dataclass
class FinetuneResidual:
    """Per-projection ``delta_h`` vectors keyed by module path (``...to_k`` / ``...to_v``)."""

    vectors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save({"format": RESIDUAL_FORMAT, "version": RESIDUAL_VERSION,
                    "vectors": {k: v.detach().clone() for k, v in self.vectors.items()},
                    "meta": self.meta}, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FinetuneResidual":
        payload = _read(Path(path), "residual")
        if payload.get("format") != RESIDUAL_FORMAT:
            raise IntegrityError(f"{path}: not a residual archive")
        if payload.get("version") != RESIDUAL_VERSION:
            raise IntegrityError(f"{path}: residual version {payload.get('version')} unsupported")
        return cls(payload["vectors"], payload.get("meta", {}))

    @property
    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.vectors.values())


@contextlib.contextmanager
def applied_residual(model: nn.Module, residual: FinetuneResidual | None):
    """Install ``delta_h`` vectors for the duration of the block, then remove them."""
    if residual is None:
        yield model
        return
    projections = dict(adapted_projections(model))
    missing = sorted(set(projections) - set(residual.vectors))
    extra = sorted(set(residual.vectors) - set(projections))
    if missing or extra:
        raise KeyError(f"residual does not match model layers: missing={missing[:4]} unexpected={extra[:4]}")
    for name, vec in residual.vectors.items():
        if vec.shape != (projections[name].d_out,):
            raise KeyError(f"residual {name} has shape {tuple(vec.shape)}, expected ({projections[name].d_out},)")
    previous = {n: p.delta_h for n, p in projections.items()}
    try:
        for name, p in projections.items():
            p.delta_h = nn.Parameter(residual.vectors[name].detach().clone(), requires_grad=False)
        yield model
    finally:
        for name, p in projections.items():
            p.delta_h = previous[name]
