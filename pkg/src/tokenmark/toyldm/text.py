"""Vocabulary, tokenizer and the one-layer causal text encoder producing psi(P)."""

from __future__ import annotations

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor
from .layers import Module

NULL = "<null>"
VOCAB: tuple[str, ...] = (
    NULL, "a", "and", "photo", "of",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "cat", "dog",
)  # fmt: skip
MAX_LEN = 8
CONTEXT_DIM = 64


class UnknownTokenError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"unknown vocabulary token {self.word!r}"


def token_id(word: str) -> int:
    try:
        return VOCAB.index(word)
    except ValueError:
        raise UnknownTokenError(word) from None


def tokenize(text: str) -> list[int]:
    return [token_id(w) for w in text.lower().split()]


def pad_ids(ids: list[int], length: int = MAX_LEN) -> np.ndarray:
    if len(ids) > length:
        raise ValueError(f"prompt has {len(ids)} tokens, at most {length} allowed")
    return np.asarray(list(ids) + [0] * (length - len(ids)), dtype=np.int64)


class TextEncoder(Module):
    """Embedding table + positional embedding + one causal self-attention layer.

    Causal masking means a token appended after the prompt never changes the
    context vectors of the tokens before it.
    """

    def __init__(self, dim: int = CONTEXT_DIM, seed: int = 1):
        super().__init__(np.random.default_rng(seed))
        self.dim = dim
        self.param("tok", (len(VOCAB), dim), std=1.0)
        self.param("pos", (MAX_LEN, dim), std=0.3)
        self.norm("ln1", dim)
        for n in ("q", "k", "v"):
            self.linear(f"attn.{n}", dim, dim, bias=False)
        self.linear("attn.o", dim, dim)
        self.norm("ln_f", dim)
        self._mask = np.triu(np.full((MAX_LEN, MAX_LEN), -1e9, dtype=np.float32), k=1)

    def null_embedding(self) -> np.ndarray:
        return self.params["tok"].data[0].copy()

    def embed(self, ids: np.ndarray, inserts: dict[int, Tensor] | None = None) -> Tensor:
        """Token embeddings (B, L, D); ``inserts`` overrides positions with free vectors."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        b, n = ids.shape
        emb = ng.take(self.params["tok"], ids)
        if inserts:
            pieces = []
            start = 0
            for pos in sorted(inserts):
                if pos > start:
                    pieces.append(emb[:, start:pos])
                vec = inserts[pos].reshape(1, 1, self.dim)
                pieces.append(vec + np.zeros((b, 1, self.dim), dtype=emb.dtype))
                start = pos + 1
            if start < n:
                pieces.append(emb[:, start:])
            emb = ng.concat(pieces, axis=1)
        return emb

    def encode(self, ids: np.ndarray, inserts: dict[int, Tensor] | None = None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        n = ids.shape[1]
        x = self.embed(ids, inserts) + self.params["pos"][:n]
        h = self.apply_ln("ln1", x)
        q = self.apply_linear("attn.q", h)
        k = self.apply_linear("attn.k", h)
        v = self.apply_linear("attn.v", h)
        logits = ng.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.dim)) + self._mask[:n, :n]
        x = x + self.apply_linear("attn.o", ng.matmul(ng.softmax(logits, -1), v))
        return self.apply_ln("ln_f", x)

    def null_context(self, batch: int = 1) -> Tensor:
        return self.encode(np.zeros((batch, MAX_LEN), dtype=np.int64))
