"""Small shared helpers: hashing, image I/O, and parameter-access tracking."""
from __future__ import annotations

import contextlib
import hashlib
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from PIL import Image
from torch.overrides import TorchFunctionMode
from torch.utils._pytree import tree_flatten


def hash_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """sha256 over (name, dtype, shape, bytes) of every tensor, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return hash_tensors(module.state_dict().items())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Decode an 8-bit image file to a (3, H, W) float tensor in [0, 1].

    With ``size`` the image is resized so the shorter side equals ``size`` and
    then center-cropped to ``size x size``.
    """
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in ("RGB", "L", "RGBA", "P"):
        raise ValueError(f"{path}: unsupported image mode {img.mode}")
    img = img.convert("RGB")
    if size is not None:
        w, h = img.size
        scale = size / min(w, h)
        nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
        img = img.resize((nw, nh), Image.BICUBIC)
        left, top = (nw - size) // 2, (nh - size) // 2
        img = img.crop((left, top, left + size, top + size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor in [0, 1] -> (H, W, 3) uint8 array."""
    arr = image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


@contextlib.contextmanager
def fixed_num_threads(n: int | None):
    """Run the block with ``n`` intra-op threads (None leaves the setting alone).

    CPU kernels split reductions differently per thread count, so pinning the
    count is what makes float results independent of the caller's setting.
    """
    if n is None:
        yield
        return
    previous = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


class ParameterAccessTracker(TorchFunctionMode):
    """Counts torch operations that take any of the watched tensors as input.

    Used to prove that a code path never touches a module's parameters::

        with ParameterAccessTracker(model.aca.parameters()) as tracker:
            run_sampling()
        assert tracker.reads == 0
    """

    def __init__(self, tensors: Iterable[torch.Tensor]):
        super().__init__()
        self._ids = {id(t) for t in tensors}
        self.reads = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        leaves, _ = tree_flatten((args, kwargs))
        if any(id(x) in self._ids for x in leaves if isinstance(x, torch.Tensor)):
            self.reads += 1
        return func(*args, **kwargs)
