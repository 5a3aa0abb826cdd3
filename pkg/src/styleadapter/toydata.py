"""Procedural captioned toy corpus: textured, palette-colored backgrounds with a
single foreground shape.

Style = (palette, pattern); content = shape.  Captions always name the shape
and name the style for a configurable fraction of records.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

PALETTES = {
    "crimson": ((150, 20, 30), (240, 190, 170), (40, 10, 10)),
    "ocean": ((10, 60, 140), (120, 210, 230), (250, 250, 220)),
    "forest": ((20, 90, 40), (170, 200, 90), (80, 40, 10)),
    "sunset": ((250, 140, 30), (120, 30, 110), (255, 230, 80)),
    "mono": ((20, 20, 20), (230, 230, 230), (130, 130, 130)),
    "violet": ((90, 40, 170), (220, 180, 250), (20, 160, 120)),
}
PATTERNS = ("stripes", "dots", "checker", "waves", "grain")
SHAPES = ("circle", "square", "triangle", "cross")


def _pattern_mask(pattern: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    period = rng.uniform(6, 12)
    phase = rng.uniform(0, 2 * np.pi)
    if pattern == "stripes":
        ang = rng.uniform(0, np.pi)
        u = xx * np.cos(ang) + yy * np.sin(ang)
        return (np.sin(2 * np.pi * u / period + phase) > 0).astype(np.float32)
    if pattern == "dots":
        cx = (xx + phase) % period - period / 2
        cy = (yy + phase) % period - period / 2
        return (cx**2 + cy**2 < (period / 3.2) ** 2).astype(np.float32)
    if pattern == "checker":
        return ((np.floor((xx + phase) / period) + np.floor(yy / period)) % 2).astype(np.float32)
    if pattern == "waves":
        return 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + 2.5 * np.sin(2 * np.pi * xx / (2 * period) + phase))
    if pattern == "grain":
        small = rng.random((size // 4, size // 4)).astype(np.float32)
        return np.kron(small, np.ones((4, 4), dtype=np.float32))
    raise ValueError(f"unknown pattern {pattern!r}")


def render(palette: str, pattern: str, shape: str, size: int = 64, seed: int = 0) -> Image.Image:
    rng = np.random.default_rng(seed)
    a, b, fg = (np.array(c, dtype=np.float32) for c in PALETTES[palette])
    m = _pattern_mask(pattern, size, rng)[..., None]
    arr = a * (1 - m) + b * m
    arr += rng.normal(0, 6, arr.shape)
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    r = rng.uniform(0.18, 0.3) * size
    cx, cy = rng.uniform(r, size - r, 2)
    color = tuple(int(v) for v in fg)
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif shape == "cross":
        w = r / 2.5
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=color)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return img


def make_toy_corpus(out_dir: str | Path, n: int = 240, size: int = 64, seed: int = 0,
                    style_caption_fraction: float = 0.5, prefix: str = "img") -> Path:
    """Write ``n`` PNGs plus ``manifest.jsonl`` into ``out_dir``; return the manifest path.

    Each record also carries ``palette``, ``pattern`` and ``shape`` labels.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    palettes = sorted(PALETTES)
    lines = []
    for i in range(n):
        pal = palettes[rng.integers(len(palettes))]
        pat = PATTERNS[rng.integers(len(PATTERNS))]
        shp = SHAPES[rng.integers(len(SHAPES))]
        name = f"{prefix}_{i:05d}.png"
        render(pal, pat, shp, size, seed=int(rng.integers(2**31))).save(out / name)
        caption = f"a {shp}"
        if rng.random() < style_caption_fraction:
            caption += f" on {pat} in {pal} tones"
        lines.append(json.dumps({"image_path": name, "caption": caption,
                                 "palette": pal, "pattern": pat, "shape": shp}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
