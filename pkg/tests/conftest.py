from __future__ import annotations

import pytest
import torch

from styleadapter.model import StyleDiffusionModel, preset
from styleadapter.text import Tokenizer
from styleadapter.toydata import make_toy_corpus

CAPTIONS = ["a circle", "a square on stripes in ocean tones", "a triangle", "a cross on dots in mono tones"]


def make_tiny_model(seed: int = 0, **overrides) -> StyleDiffusionModel:
    cfg = preset("tiny", **overrides)
    torch.manual_seed(seed)
    model = StyleDiffusionModel(cfg, Tokenizer.from_captions(CAPTIONS, cfg.max_text_tokens))
    model.eval()
    return model


def randomize_adapters(model, seed: int = 1, scale: float = 0.5) -> None:
    """Give the zero-initialized pieces non-trivial values so paths are exercised."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(("delta_up", "delta_down")) or ".level_mlps." in name or name.startswith("aca."):
                p.copy_(torch.randn(p.shape, generator=gen) * scale / max(1, p.shape[-1]) ** 0.5)


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def trained_tiny_model():
    model = make_tiny_model()
    randomize_adapters(model)
    return model


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy16")
    return make_toy_corpus(out, n=24, size=16, seed=3)


@pytest.fixture
def rand_image():
    def _make(seed: int, size: int = 16) -> torch.Tensor:
        return torch.rand((3, size, size), generator=torch.Generator().manual_seed(seed))
    return _make
