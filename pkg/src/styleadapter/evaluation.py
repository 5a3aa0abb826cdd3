"""Proxy evaluation: feature-statistics style similarity and an optional external
text-image scorer, over a prompts x styles test set."""
from __future__ import annotations

import csv
import json
import logging
import shlex
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .model import StyleDiffusionModel
from .sampler import SampleOptions, generate, image_id
from .style_encoder import StyleEncoder
from .utils import load_image

log = logging.getLogger(__name__)

STYLE_METRIC = "proxy: 1 / (1 + L2 distance of standardized multi-level feature statistics)"


def style_vector(encoder: StyleEncoder, image: torch.Tensor) -> torch.Tensor:
    """Concatenated low/mid/high StatVectors of one (3, H, W) image."""
    return torch.cat([s[0] for s in encoder.image_statistics(image)]).double()


def standardization_scale(vectors: Sequence[torch.Tensor], floor: float = 1e-6) -> torch.Tensor | None:
    """Per-dimension population std over a batch; None when the batch has < 2 vectors."""
    if len(vectors) < 2:
        return None
    return torch.stack(list(vectors)).std(dim=0, unbiased=False).clamp_min(floor)


def similarity_from_vectors(a: torch.Tensor, b: torch.Tensor, scale: torch.Tensor | None = None) -> float:
    diff = a - b if scale is None else (a - b) / scale
    return 1.0 / (1.0 + float(diff.norm()))


def style_similarity(encoder: StyleEncoder, generated: torch.Tensor, reference: torch.Tensor,
                     batch: Sequence[torch.Tensor] = ()) -> tuple[float, bool]:
    """Score in (0, 1]; returns (score, standardized).

    ``batch`` holds the images whose statistics define the per-dimension
    standardization; with fewer than two the raw distance is used.
    """
    a, b = style_vector(encoder, generated), style_vector(encoder, reference)
    scale = standardization_scale([style_vector(encoder, im) for im in batch])
    return similarity_from_vectors(a, b, scale), scale is not None


def run_embedder(cmd: str, image_path: Path, prompt: str, timeout: float = 120.0) -> float | None:
    """Invoke ``cmd IMAGE PROMPT``; stdout must be one number.  Failures yield None."""
    try:
        proc = subprocess.run([*shlex.split(cmd), str(image_path), prompt], capture_output=True,
                              text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        log.warning("embedder failed for %s: %s", image_path, exc)
        return None
    if proc.returncode != 0:
        log.warning("embedder exited %d for %s", proc.returncode, image_path)
        return None
    try:
        return float(proc.stdout.strip().split()[0])
    except (ValueError, IndexError):
        log.warning("embedder printed no score for %s", image_path)
        return None


@dataclass
class EvalRow:
    prompt: str
    style_ref: str
    image: str
    style_score: float
    text_score: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    standardized: bool = True
    style_metric: str = STYLE_METRIC
    options: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        styles = [r.style_score for r in self.rows]
        texts = [r.text_score for r in self.rows if r.text_score is not None]
        return {
            "count": len(self.rows),
            "mean_style": sum(styles) / len(styles) if styles else None,
            "mean_text": sum(texts) / len(texts) if texts else None,
            "text_count": len(texts),
        }

    def to_dict(self) -> dict:
        return {"style_metric": self.style_metric, "standardized": self.standardized, "options": self.options,
                "aggregates": self.aggregates, "rows": [asdict(r) for r in self.rows]}

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js = out / "report.json"
        js.write_text(json.dumps(self.to_dict(), indent=2))
        cs = out / "report.csv"
        with open(cs, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prompt", "style_ref", "image", "style_score", "text_score"])
            for r in self.rows:
                w.writerow([r.prompt, r.style_ref, r.image, f"{r.style_score:.6f}",
                            "" if r.text_score is None else f"{r.text_score:.6f}"])
        return js, cs


def read_testset(path: str | Path) -> tuple[list[str], list[Path]]:
    """JSON ``{"prompts": [...], "styles": [...]}``; style paths relative to the file."""
    path = Path(path)
    data = json.loads(path.read_text())
    prompts = [str(p) for p in data["prompts"]]
    styles = [Path(s) if Path(s).is_absolute() else path.parent / s for s in data["styles"]]
    if not prompts or not styles:
        raise ValueError(f"{path}: test set needs at least one prompt and one style")
    return prompts, styles


def evaluate_testset(model: StyleDiffusionModel, prompts: Sequence[str], styles: Sequence[Path],
                     out_dir: str | Path, opts: SampleOptions | None = None,
                     embedder_cmd: str | None = None) -> EvalReport:
    """Generate every (prompt, style) pair, prompt-major, all at ``opts.seed``."""
    opts = opts or SampleOptions()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    enc = model.style_encoder
    ref_vecs = {s: style_vector(enc, load_image(s)) for s in styles}
    pending = []
    for i, prompt in enumerate(prompts):
        for j, style in enumerate(styles):
            img_path = out / "images" / f"p{i:03d}_s{j:03d}.png"
            image, _ = generate(model, prompt, [style], opts=opts, out_path=img_path)
            pending.append((prompt, style, img_path, style_vector(enc, image)))
    scale = standardization_scale([v for *_, v in pending])
    rows = []
    for prompt, style, img_path, vec in pending:
        text_score = run_embedder(embedder_cmd, img_path, prompt) if embedder_cmd else None
        rows.append(EvalRow(prompt, str(style), str(img_path.relative_to(out)),
                            similarity_from_vectors(vec, ref_vecs[style], scale), text_score))
    report = EvalReport(rows, standardized=scale is not None,
                        options={**asdict(opts), "style_ids": [image_id(s) for s in styles],
                                 "embedder_cmd": embedder_cmd})
    report.write(out)
    return report


def ranking_accuracy(encoder: StyleEncoder, triples: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]) -> float:
    """Fraction of (output, matching_ref, mismatched_ref) triples where the output
    scores higher against its own reference.  Standardization uses every image
    in the triples."""
    vecs = [tuple(style_vector(encoder, im) for im in tri) for tri in triples]
    scale = standardization_scale([v for tri in vecs for v in tri])
    wins = sum(similarity_from_vectors(o, m, scale) > similarity_from_vectors(o, x, scale) for o, m, x in vecs)
    return wins / len(vecs)
