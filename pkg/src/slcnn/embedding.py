"""Pretrained word vectors and document tensorization.

Embeddings are frozen: they contribute no trainable parameters.  Tokens
missing from the table get a deterministic random vector drawn uniformly
from [-0.01, 0.01], keyed by (token, oov_seed) so the draw is independent
of lookup order, thread interleaving, and process restarts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import PAD_TOKEN, TokenGrid

OOV_RANGE = 0.01

VOCAB_CACHE_MAGIC = b"SLCV"


class EmbeddingFormatError(Exception):
    """Raised for malformed embedding files."""


def _fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; a stable stand-in for Python's salted hash()."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class EmbeddingTable:
    """Word -> vector table with seeded out-of-vocabulary fallback."""

    dim: int
    vocab: dict[str, int]
    matrix: np.ndarray  # (len(vocab), dim) float32
    oov_seed: int = 0
    oov_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._zero = np.zeros(self.dim, dtype=np.float32)
        self._zero.flags.writeable = False

    def lookup(self, token: str) -> np.ndarray:
        """Vector for *token*: stored row, zeros for pad, or a cached OOV draw."""
        if token == PAD_TOKEN:
            return self._zero
        row = self.vocab.get(token)
        if row is not None:
            return self.matrix[row]
        cached = self.oov_cache.get(token)
        if cached is not None:
            return cached
        vec = self._draw_oov(token)
        # dict.setdefault is atomic under the GIL, giving insert-once
        # semantics for concurrent lookups of the same token.
        return self.oov_cache.setdefault(token, vec)

    def _draw_oov(self, token: str) -> np.ndarray:
        seed = _fnv1a64(token.encode("utf-8")) ^ (self.oov_seed & 0xFFFFFFFFFFFFFFFF)
        rng = np.random.Generator(np.random.PCG64(seed))
        vec = rng.uniform(-OOV_RANGE, OOV_RANGE, self.dim).astype(np.float32)
        # float32 rounding may land a hair outside the open interval.
        np.clip(vec, np.float32(-OOV_RANGE), np.float32(OOV_RANGE), out=vec)
        vec.flags.writeable = False
        return vec


def load_embeddings(path: str | Path, dim: int, *, oov_seed: int = 0) -> EmbeddingTable:
    """Parse a text embedding file: one token plus *dim* decimals per line.

    Duplicate tokens keep their first occurrence.  A line with the wrong
    number of fields raises EmbeddingFormatError naming the line.
    """
    path = Path(path)
    vocab: dict[str, int] = {}
    rows: list[np.ndarray] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{line_no}: expected token + {dim} values, got {len(parts)} fields"
                )
            token = parts[0]
            if token in vocab:
                continue
            try:
                vec = np.array(parts[1:], dtype=np.float32)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{line_no}: {exc}") from None
            vocab[token] = len(rows)
            rows.append(vec)
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingTable(dim=dim, vocab=vocab, matrix=matrix, oov_seed=oov_seed)


@dataclass
class DocTensor:
    """The 3D document representation fed to the network."""

    data: np.ndarray  # (doc_len, sent_len, dim) float32
    label: int


def tensorize(grid: TokenGrid, table: EmbeddingTable, label: int = 0) -> DocTensor:
    """Lookup every grid cell: out[i][j] = vector of grid token (i, j)."""
    out = np.zeros((grid.doc_len, grid.sent_len, table.dim), dtype=np.float32)
    for i, row in enumerate(grid.sentences):
        for j, token in enumerate(row):
            if token == PAD_TOKEN:
                break
            out[i, j] = table.lookup(token)
    return DocTensor(data=out, label=label)


def embedding_matrix_for_vocab(table: EmbeddingTable, vocab: Sequence[str]) -> np.ndarray:
    """Rows of *table* for a grid-dataset vocabulary, with id 0 = pad = zeros.

    Row i+1 is table.lookup(vocab[i]), so the id-indexed batch path produces
    bit-identical tensors to per-token tensorize().
    """
    out = np.zeros((len(vocab) + 1, table.dim), dtype=np.float32)
    for i, token in enumerate(vocab):
        out[i + 1] = table.lookup(token)
    return out


# --------------------------------------------------------------------------
# On-disk cache of just the corpus-vocabulary rows
# --------------------------------------------------------------------------

def write_vocab_cache(table: EmbeddingTable, tokens: Iterable[str], path: str | Path) -> None:
    """Write a binary slice of the table: magic ``SLCV``, u32 dim, u32 count,
    then per token a u16 byte length, the UTF-8 bytes, and dim little-endian
    float32 values."""
    tokens = list(dict.fromkeys(tokens))
    with Path(path).open("wb") as out:
        out.write(VOCAB_CACHE_MAGIC)
        out.write(struct.pack("<II", table.dim, len(tokens)))
        for token in tokens:
            raw = token.encode("utf-8")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
            out.write(table.lookup(token).astype("<f4").tobytes())


def read_vocab_cache(path: str | Path, *, oov_seed: int = 0) -> EmbeddingTable:
    """Load a cache written by write_vocab_cache as a small EmbeddingTable."""
    data = Path(path).read_bytes()
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise EmbeddingFormatError(f"truncated vocab cache: {path}")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4)) != VOCAB_CACHE_MAGIC:
        raise EmbeddingFormatError(f"not a vocab cache (bad magic): {path}")
    dim, count = struct.unpack("<II", take(8))
    vocab: dict[str, int] = {}
    rows = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        (length,) = struct.unpack("<H", take(2))
        token = bytes(take(length)).decode("utf-8")
        rows[i] = np.frombuffer(take(4 * dim), dtype="<f4")
        vocab[token] = i
    if len(view):
        raise EmbeddingFormatError(f"trailing bytes in vocab cache: {path}")
    return EmbeddingTable(dim=dim, vocab=vocab, matrix=rows, oov_seed=oov_seed)
