"""Character-level tokenisation and corpus slicing."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class CharTokenizer:
    vocab: str

    @classmethod
    def from_text(cls, text: str) -> "CharTokenizer":
        return cls("".join(sorted(set(text))))

    @property
    def size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.vocab)}
        try:
            return np.array([index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.vocab[i] for i in ids)


def sample_corpus_text() -> str:
    return resources.files("eigenattn").joinpath("data/sample.txt").read_text(encoding="utf-8")


def read_corpus(path: Optional[str | Path] = None) -> str:
    """UTF-8 text of ``path``, or the bundled sample corpus when ``path`` is None."""
    if path is None:
        return sample_corpus_text()
    return Path(path).read_text(encoding="utf-8")


@dataclass(frozen=True)
class CorpusSplit:
    train: np.ndarray
    calib: np.ndarray
    heldout: np.ndarray


def split_tokens(tokens: np.ndarray, heldout_frac: float = 0.1, calib_frac: float = 0.1) -> CorpusSplit:
    """Contiguous train / calibration / held-out slices, in that order."""
    n = len(tokens)
    n_hold = int(n * heldout_frac)
    n_cal = int(n * calib_frac)
    n_train = n - n_hold - n_cal
    return CorpusSplit(tokens[:n_train], tokens[n_train:n_train + n_cal], tokens[n_train + n_cal:])


def calibration_sequences(tokens: np.ndarray, n_samples: int, seq_len: int) -> np.ndarray:
    """First ``n_samples`` consecutive non-overlapping windows of ``seq_len`` tokens."""
    need = n_samples * seq_len
    if len(tokens) < need:
        raise ValueError(
            f"calibration needs {need} tokens ({n_samples} x {seq_len}), only {len(tokens)} available")
    return np.asarray(tokens[:need], dtype=np.int64).reshape(n_samples, seq_len)
