"""Evaluation token streams: byte-level text files or seeded synthetic ids."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = ["Tokenizer", "TokenStream", "Chunk", "load_text", "synth_stream", "iter_chunks", "DEFAULT_CHUNK_LEN"]

DEFAULT_CHUNK_LEN = 128


class Tokenizer(str, enum.Enum):
    BYTE_LEVEL = "byte_level"


@dataclass(frozen=True, eq=False)
class TokenStream:
    tokens: np.ndarray
    vocab_size: int
    source_digest: str

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 2:
            raise ValueError("a token stream needs at least 2 tokens")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass(frozen=True)
class Chunk:
    inputs: np.ndarray
    targets: np.ndarray


def load_text(path: str | Path, tokenizer: Tokenizer = Tokenizer.BYTE_LEVEL) -> TokenStream:
    """Read ``path`` as raw bytes; each byte is one token (vocab 256)."""
    tokenizer = Tokenizer(tokenizer)
    raw = Path(path).read_bytes()
    if len(raw) < 2:
        raise ValueError(f"{path}: need at least 2 tokens, got {len(raw)}")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return TokenStream(tokens, 256, hashlib.sha256(raw).hexdigest())


def synth_stream(seed: int, length: int, vocab_size: int = 256) -> TokenStream:
    """Uniform ids from ``PCG64(SeedSequence(seed))``."""
    if length < 2:
        raise ValueError("length must be >= 2")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    tokens = rng.integers(0, vocab_size, size=length, dtype=np.int64)
    digest = hashlib.sha256(f"synth:{seed}:{length}:{vocab_size}".encode()).hexdigest()
    return TokenStream(tokens, vocab_size, digest)


def iter_chunks(stream: TokenStream, chunk_len: int = DEFAULT_CHUNK_LEN) -> Iterator[Chunk]:
    """Non-overlapping windows ``inputs = tok[s:s+L]``, ``targets = tok[s+1:s+L+1]``.

    Every token after the first is a target exactly once; the final chunk may
    be shorter.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    tok = stream.tokens
    n_pred = tok.size - 1
    for s in range(0, n_pred, chunk_len):
        e = min(s + chunk_len, n_pred)
        yield Chunk(tok[s:e], tok[s + 1 : e + 1])
