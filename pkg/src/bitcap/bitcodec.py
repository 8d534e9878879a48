"""Word index <-> analog bit conversion.

Each word index becomes a fixed-length column of +-scale entries (the
binary expansion of the index, zero-centered so the Gaussian corruption
process sees a zero-mean signal).  Decoding thresholds at zero and falls
back to the Hamming-nearest code row for bit patterns no word owns.
Instances are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
UNK = 1
PAD_WORD = "<pad>"
UNK_WORD = "<unk>"


def bits_per_word(vocab_size: int) -> int:
    """Number of bits needed for a vocabulary: ceil(log2(vocab_size))."""
    if vocab_size < 2:
        raise ValueError(f"vocabulary must have at least 2 words, got {vocab_size}")
    return int(math.ceil(math.log2(vocab_size)))


@dataclass(frozen=True)
class Vocabulary:
    """Dense word<->index table with reserved pad/unk slots, plus max length."""

    words: tuple[str, ...]
    seq_len: int
    index: dict[str, int] = field(repr=False, default=None)

    def __post_init__(self):
        if self.words[PAD] != PAD_WORD or self.words[UNK] != UNK_WORD:
            raise ValueError("vocabulary must reserve index 0 for <pad> and 1 for <unk>")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def build(cls, words: list[str], seq_len: int) -> "Vocabulary":
        return cls(words=(PAD_WORD, UNK_WORD, *words), seq_len=seq_len)

    def __len__(self) -> int:
        return len(self.words)

    def encode_words(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode_ids(self, ids, keep_pad: bool = False) -> list[str]:
        out = [self.words[int(i)] for i in ids]
        if not keep_pad:
            out = [w for w in out if w != PAD_WORD]
        return out

    def save(self, path: str | Path) -> None:
        # reserved entries are implicit: line number = index - 2
        Path(path).write_text("\n".join(self.words[2:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, seq_len: int) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.build(words, seq_len)


class BitCodec:
    """Vocabulary-sized table of zero-centered analog bit codes."""

    def __init__(self, vocab_size: int, seq_len: int, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.vocab_size = vocab_size
        self.seq_len = seq_len
        self.scale = float(scale)
        self.n_bits = bits_per_word(vocab_size)
        shifts = np.arange(self.n_bits - 1, -1, -1)
        rows = (np.arange(vocab_size)[:, None] >> shifts[None, :]) & 1
        if len({r.tobytes() for r in rows}) != vocab_size:
            raise AssertionError("code rows must be pairwise distinct")
        self._rows01 = rows.astype(np.int8)
        # codes[c] is the +-scale bit row of word c
        self.codes = (rows * 2.0 - 1.0) * self.scale
        self._row_lookup = {r.tobytes(): i for i, r in enumerate(self._rows01)}

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, scale: float = 1.0) -> "BitCodec":
        return cls(len(vocab), vocab.seq_len, scale=scale)

    def pad_ids(self, ids) -> np.ndarray:
        """Pad or truncate a word-id sequence to the fixed sentence length."""
        out = np.full(self.seq_len, PAD, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)[: self.seq_len]
        out[: len(ids)] = ids
        return out

    def encode_sentence(self, ids) -> np.ndarray:
        """Word ids -> analog bit matrix of shape (n_bits, seq_len)."""
        ids = self.pad_ids(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = int(ids[(ids < 0) | (ids >= self.vocab_size)][0])
            raise ValueError(f"word index {bad} outside vocabulary of size {self.vocab_size}")
        return self.codes[ids].T.copy()

    def encode_batch(self, sentences) -> np.ndarray:
        return np.stack([self.encode_sentence(s) for s in sentences])

    def quantize_decode(self, x: np.ndarray) -> np.ndarray:
        """Real (..., n_bits, seq_len) estimates -> word ids (..., seq_len).

        Columns threshold at zero; patterns without an owner resolve to the
        Hamming-nearest code row, ties to the lowest word index.
        """
        x = np.asarray(x)
        if x.shape[-2] != self.n_bits:
            raise ValueError(f"expected {self.n_bits} bit rows, got {x.shape[-2]}")
        bits = (x > 0).astype(np.int8)
        cols = np.swapaxes(bits, -1, -2)  # (..., seq_len, n_bits)
        flat = cols.reshape(-1, self.n_bits)
        out = np.empty(flat.shape[0], dtype=np.int64)
        for i, row in enumerate(flat):
            hit = self._row_lookup.get(row.tobytes())
            if hit is None:
                dist = (self._rows01 != row).sum(axis=1)
                hit = int(np.argmin(dist))  # argmin takes the first (lowest index) on ties
            out[i] = hit
        return out.reshape(cols.shape[:-1])
