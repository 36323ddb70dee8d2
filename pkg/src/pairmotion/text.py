"""Fixed 64-token vocabulary, description templates and the toy text encoder."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .motion import TextCondition

VOCAB = (
    "two", "people", "person", "one", "the", "other", "each", "a",
    "walk", "walks", "toward", "approaches", "slowly", "quickly", "while", "stands",
    "still", "circles", "around", "clockwise", "counterclockwise", "in", "wide", "tight",
    "dance", "mirroring", "waving", "raising", "arms", "both", "pushes", "steps",
    "back", "gently", "hard", "who", "and", "first", "second", "retreats",
    "forward", "together", "facing", "turns", "moves", "circle", "left", "right",
    "hands", "greet", "follow", "away", "near", "far", "up", "down",
    "jump", "spar", "sway", "side", "to", "with", "lead", "watch",
)
assert len(VOCAB) == 64 and len(set(VOCAB)) == 64
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


class UnknownTokenError(KeyError):
    pass


def tokenize(text: str) -> tuple[int, ...]:
    try:
        return tuple(TOKEN_ID[w] for w in text.lower().split())
    except KeyError as e:
        raise UnknownTokenError(f"word {e.args[0]!r} is not in the vocabulary") from None


def detokenize(tokens) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def check_tokens(tokens) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    for t in tokens:
        if not 0 <= t < len(VOCAB):
            raise UnknownTokenError(f"token id {t} outside vocabulary of {len(VOCAB)}")
    return tokens


class TextEncoder(nn.Module):
    """Mean-pooled learned token embeddings. The empty sequence maps to zeros."""

    def __init__(self, dim: int = 64, vocab_size: int = len(VOCAB)):
        super().__init__()
        self.dim = dim
        self.embedding = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embedding.weight, std=0.5)

    def forward(self, batch: list[tuple[int, ...]]) -> torch.Tensor:
        out = self.embedding.weight.new_zeros(len(batch), self.dim)
        if not batch:
            return out
        lengths = [len(check_tokens(t)) for t in batch]
        flat = [t for toks in batch for t in toks]
        if not flat:
            return out
        ids = torch.tensor(flat, dtype=torch.long)
        owner = torch.repeat_interleave(torch.arange(len(batch)), torch.tensor(lengths))
        summed = out.index_add(0, owner, self.embedding(ids))
        counts = torch.tensor(lengths, dtype=out.dtype).clamp_min(1).unsqueeze(1)
        return summed / counts


def encode_text(tokens, encoder: TextEncoder) -> TextCondition:
    tokens = check_tokens(tokens)
    with torch.no_grad():
        emb = encoder([tokens])[0].detach().cpu().numpy()
    return TextCondition(tokens, emb)


def bag_of_tokens(batch, vocab_size: int = len(VOCAB)) -> np.ndarray:
    """Normalised token histograms, one row per description."""
    out = np.zeros((len(batch), vocab_size))
    for i, toks in enumerate(batch):
        for t in check_tokens(toks):
            out[i, t] += 1.0
        if toks:
            out[i] /= len(toks)
    return out
