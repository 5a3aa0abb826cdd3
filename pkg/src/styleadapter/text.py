"""Prompt tokenization, token embedding, and the joint style+text context encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import ShapeError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
_SPECIALS = (PAD, BOS, EOS)
_N_BYTES = 256
_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class Tokenizer:
    """Word-level vocabulary over training captions with a byte fallback.

    Ids: 0-2 specials, 3-258 raw bytes, then words in sorted order.
    """

    def __init__(self, words: Iterable[str] = (), max_text_tokens: int = 68):
        if max_text_tokens < 2:
            raise ValueError("max_text_tokens must leave room for BOS and EOS")
        self.max_text_tokens = max_text_tokens
        self.words = sorted(set(words))
        self._word_ids = {w: len(_SPECIALS) + _N_BYTES + i for i, w in enumerate(self.words)}

    @classmethod
    def from_captions(cls, captions: Iterable[str], max_text_tokens: int = 68) -> "Tokenizer":
        words = {w for c in captions for w in _WORD_RE.findall(c.lower())}
        return cls(words, max_text_tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def vocab_size(self) -> int:
        return len(_SPECIALS) + _N_BYTES + len(self.words)

    def _piece_ids(self, piece: str) -> list[int]:
        if piece in self._word_ids:
            return [self._word_ids[piece]]
        return [len(_SPECIALS) + b for b in piece.encode("utf-8")]

    def tokenize(self, prompt: str) -> list[int]:
        body: list[int] = []
        for piece in _WORD_RE.findall(prompt.lower()):
            body.extend(self._piece_ids(piece))
        body = body[: self.max_text_tokens - 2]
        return [self.bos_id, *body, self.eos_id]

    def batch(self, prompts: Sequence[str]) -> torch.Tensor:
        """Token ids padded to ``max_text_tokens``, shape (B, max_text_tokens)."""
        out = torch.full((len(prompts), self.max_text_tokens), self.pad_id, dtype=torch.long)
        for i, p in enumerate(prompts):
            ids = self.tokenize(p)
            out[i, : len(ids)] = torch.tensor(ids)
        return out

    def to_list(self) -> list[str]:
        return list(self.words)


@dataclass
class EncodedContext:
    """Contextualized sequence, style slots first when present.

    ``hidden`` has shape (B, n_style + L, d).
    """

    hidden: torch.Tensor
    n_style: int = 0

    def __post_init__(self):
        if self.hidden.dim() != 3:
            raise ShapeError(f"context must be (B, S, d), got {tuple(self.hidden.shape)}")

    @property
    def e_sty(self) -> torch.Tensor | None:
        return self.hidden[:, : self.n_style] if self.n_style else None

    @property
    def e_txt(self) -> torch.Tensor:
        return self.hidden[:, self.n_style:]

    @property
    def style_mask(self) -> torch.Tensor:
        mask = torch.zeros(self.hidden.shape[1], dtype=torch.bool)
        mask[: self.n_style] = True
        return mask

    def select(self, rows: torch.Tensor) -> "EncodedContext":
        return EncodedContext(self.hidden[rows], self.n_style)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / (d // self.heads) ** 0.5, dim=-1)
        x = x + self.proj((attn @ v).transpose(1, 2).reshape(b, s, d))
        return x + self.mlp(self.ln2(x))


class TextPipeline(nn.Module):
    """Token lookup plus a bidirectional transformer over [style ; text]."""

    def __init__(self, tokenizer: Tokenizer, d: int, layers: int = 4, heads: int = 4, n_style: int = 9):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.tokenizer = tokenizer
        self.d = d
        self.n_style = n_style
        self.max_length = n_style + tokenizer.max_text_tokens
        self.token_embedding = nn.Embedding(tokenizer.vocab_size, d)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        # Text position i uses row n_style + i; the first n_style rows are reserved.
        self.position_embedding = nn.Parameter(torch.randn(self.max_length, d) * 0.01)
        self.blocks = nn.ModuleList(EncoderBlock(d, heads) for _ in range(layers))
        self.final_norm = nn.LayerNorm(d)

    def tokenize(self, prompt: str) -> list[int]:
        return self.tokenizer.tokenize(prompt)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, L) or (L,) ids -> (B, L, d) or (L, d) text embeddings."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if bool(((ids < 0) | (ids >= self.tokenizer.vocab_size)).any()):
            raise IndexError("token id outside the vocabulary")
        L = ids.shape[-1]
        if L > self.tokenizer.max_text_tokens:
            raise ShapeError(f"{L} tokens exceed max_text_tokens={self.tokenizer.max_text_tokens}")
        pos = self.position_embedding[self.n_style: self.n_style + L]
        return self.token_embedding(ids) + pos

    def encode_context(self, style: torch.Tensor | None, text: torch.Tensor) -> EncodedContext:
        """Contextualize [style ; text].  ``style`` is (B, 9, d) or (9, d) or None."""
        if text.dim() == 2:
            text = text.unsqueeze(0)
        parts = [text]
        n_style = 0
        if style is not None:
            if style.dim() == 2:
                style = style.unsqueeze(0).expand(text.shape[0], -1, -1)
            if style.shape[-1] != self.d or style.shape[-2] != self.n_style:
                raise ShapeError(f"style tokens must be ({self.n_style}, {self.d}), got {tuple(style.shape)}")
            parts.insert(0, style)
            n_style = self.n_style
        x = torch.cat(parts, dim=1)
        if x.shape[1] > self.max_length:
            raise ShapeError(f"sequence length {x.shape[1]} exceeds encoder maximum {self.max_length}")
        for block in self.blocks:
            x = block(x)
        return EncodedContext(self.final_norm(x), n_style)

    def encode_prompts(self, prompts: Sequence[str], style: torch.Tensor | None = None) -> EncodedContext:
        return self.encode_context(style, self.embed_tokens(self.tokenizer.batch(prompts)))
