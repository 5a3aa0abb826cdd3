"""Train-only content adapter: color augmentation, a strided conv encoder, and
the timestep gate that limits injection to the noisiest steps."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from .errors import ShapeError


@dataclass
class AugmentPolicy:
    inversion_probability: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.inversion_probability <= 1.0:
            raise ValueError("inversion_probability must be in [0, 1]")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} range must be non-negative")
        if self.hue > 0.5:
            raise ValueError("hue range must be <= 0.5")


def _uniform(gen: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=gen))


def augment_content(image: torch.Tensor, policy: AugmentPolicy,
                    rng: int | torch.Generator = 0) -> torch.Tensor:
    """Random inversion followed by color jitter, clamped to [0, 1].

    ``image`` is (3, H, W) or (B, 3, H, W); every image in a batch draws its own
    parameters.  Random draws happen in a fixed order whether or not an op is
    enabled, so a seed always maps to the same parameters.
    """
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    if image.dim() == 4:
        return torch.stack([augment_content(im, policy, gen) for im in image])
    out = image
    invert = float(torch.rand((), generator=gen)) < policy.inversion_probability
    b = _uniform(gen, 1 - policy.brightness, 1 + policy.brightness)
    c = _uniform(gen, 1 - policy.contrast, 1 + policy.contrast)
    s = _uniform(gen, 1 - policy.saturation, 1 + policy.saturation)
    h = _uniform(gen, -policy.hue, policy.hue)
    if invert:
        out = 1.0 - out
    if policy.brightness:
        out = TF.adjust_brightness(out, max(b, 0.0))
    if policy.contrast:
        out = TF.adjust_contrast(out, max(c, 0.0))
    if policy.saturation:
        out = TF.adjust_saturation(out, max(s, 0.0))
    if policy.hue:
        out = TF.adjust_hue(out, h)
    return out.clamp(0.0, 1.0)


def gate_aca(t: torch.Tensor | int, T: int, fraction: float = 0.2) -> torch.Tensor:
    """True where ``t >= (1 - fraction) * T``: the noisiest ``fraction`` of steps."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    t = torch.as_tensor(t, dtype=torch.long)
    if bool(((t < 0) | (t >= T)).any()):
        raise IndexError(f"timestep out of range [0, {T - 1}]")
    return t >= (1.0 - fraction) * T


class ContentAdapter(nn.Module):
    """Strided conv encoder from the (augmented) clean image to a feature map
    shaped like the UNet's deepest input block."""

    def __init__(self, image_size: int, out_shape: tuple[int, int, int], base_width: int = 32):
        super().__init__()
        out_ch, out_res, _ = out_shape
        if image_size % out_res or (image_size // out_res) & (image_size // out_res - 1):
            raise ShapeError(f"cannot reach {out_res}x{out_res} from {image_size} by stride-2 steps")
        n_down = (image_size // out_res).bit_length() - 1
        self.image_size = image_size
        self.out_shape = tuple(out_shape)
        self.stem = nn.Conv2d(3, base_width, 3, padding=1)
        layers = []
        ch = base_width
        for i in range(n_down):
            nxt = min(base_width * 2 ** (i + 1), out_ch)
            layers += [nn.SiLU(), nn.Conv2d(ch, nxt, 3, stride=2, padding=1)]
            ch = nxt
        self.down = nn.Sequential(*layers)
        self.out = nn.Conv2d(ch, out_ch, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image`` in [0, 1], (B, 3, H, W)."""
        if image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            raise ShapeError(f"content adapter expects {self.image_size}x{self.image_size} input")
        x = self.stem(image * 2.0 - 1.0)
        return self.out(F.silu(self.down(x)))

    def encode_content(self, image: torch.Tensor) -> torch.Tensor:
        return self(image)
