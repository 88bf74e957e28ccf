"""Byte-level text and synthetic regression data sources."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .quant import substream

__all__ = [
    "DataError",
    "TextData",
    "RegressionData",
    "ingest_text",
    "ingest_synthetic",
    "synthetic_corpus",
]

_TRAIN_KEY = 101
_VAL_KEY = 102
_TRUTH_KEY = 103


class DataError(ValueError):
    pass


@dataclass(eq=False)
class TextData:
    vocab: bytes
    train: np.ndarray
    val: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _windows(self, tokens: np.ndarray, starts: np.ndarray, context: int):
        idx = starts[:, None] + np.arange(context + 1)
        w = tokens[idx]
        return w[:, :context], w[:, context]

    def train_batch(self, seed: int, step: int, batch_size: int, context: int):
        n = self.train.size - context
        if n < 1:
            raise DataError(f"training split of {self.train.size} tokens is shorter than context {context}")
        starts = substream(seed, _TRAIN_KEY, step).integers(0, n, batch_size)
        return self._windows(self.train, starts, context)

    def val_batch(self, context: int, max_windows: int = 2048):
        n = self.val.size - context
        if n < 1:
            raise DataError(f"validation split of {self.val.size} tokens is shorter than context {context}")
        starts = np.unique(np.linspace(0, n - 1, min(n, max_windows)).astype(np.int64))
        return self._windows(self.val, starts, context)


def ingest_text(path, val_frac: float = 0.05) -> TextData:
    """Map bytes to a dense vocabulary; last ``val_frac`` of the file is validation."""
    if not os.path.isfile(path):
        raise DataError(f"cannot read text file {path!r}")
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise DataError(f"text file {path!r} is empty")
    arr = np.frombuffer(raw, np.uint8)
    vocab = np.unique(arr)
    lookup = np.zeros(256, np.int64)
    lookup[vocab] = np.arange(vocab.size)
    tokens = lookup[arr]
    cut = int(round(tokens.size * (1.0 - val_frac)))
    return TextData(bytes(vocab.tolist()), tokens[:cut], tokens[cut:])


@dataclass(eq=False)
class RegressionData:
    weight: np.ndarray
    noise: float
    seed: int
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[0]

    def _sample(self, rng: np.random.Generator, n: int):
        # targets come from the float32 inputs the model sees, so noise 0 has an exact optimum
        x = rng.standard_normal((n, self.n_features)).astype(np.float32)
        y = x.astype(np.float64) @ self.weight.T + np.sqrt(self.noise) * rng.standard_normal((n, self.n_outputs))
        return x, y

    def train_batch(self, seed: int, step: int, batch_size: int, context: int | None = None):
        return self._sample(substream(seed, _TRAIN_KEY, step), batch_size)

    def val_batch(self, context: int | None = None, max_windows: int | None = None):
        return self.val_x, self.val_y


def ingest_synthetic(n_features: int, n_outputs: int, noise: float, seed: int,
                     n_val: int = 1024) -> RegressionData:
    """Targets ``W x + eps``, ``eps ~ N(0, noise)``, with a seeded ground-truth W and Gaussian x.

    ``noise`` is the variance of the target noise, so it is also the optimal MSE.
    """
    if n_features < 1 or n_outputs < 1 or noise < 0 or n_val < 1:
        raise DataError("invalid synthetic regression spec")
    W = substream(seed, _TRUTH_KEY).standard_normal((n_outputs, n_features)) / np.sqrt(n_features)
    data = RegressionData(W, float(noise), seed, np.zeros(0), np.zeros(0))
    data.val_x, data.val_y = data._sample(substream(seed, _VAL_KEY), n_val)
    return data


_ONSETS = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "br", "ch", "cl", "dr", "gr", "pl", "sh", "st", "th", "tr"]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ea", "ee", "ou", "oo"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "rk"]


def synthetic_corpus(n_bytes: int, seed: int = 0, n_words: int = 600) -> bytes:
    """Pseudo-English text from a random word bigram model.

    Gives a char-level LM something with real structure (spelling, word
    transitions, punctuation) without shipping a dataset.
    """
    rng = np.random.default_rng(seed)
    words = set()
    while len(words) < n_words:
        n_syl = rng.choice([1, 1, 2, 2, 2, 3])
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(n_syl)
        )
        words.add(w)
    words = sorted(words)
    zipf = 1.0 / np.arange(1, n_words + 1) ** 1.1
    succ = rng.integers(0, n_words, (n_words, 12))
    succ_p = rng.dirichlet(np.ones(12) * 0.5, n_words)

    out: list[str] = []
    size = 0
    w = int(rng.choice(n_words, p=zipf / zipf.sum()))
    while size < n_bytes:
        length = int(rng.integers(4, 13))
        sent = []
        for _ in range(length):
            sent.append(words[w])
            w = int(succ[w, rng.choice(12, p=succ_p[w])])
            if rng.random() < 0.05:
                w = int(rng.choice(n_words, p=zipf / zipf.sum()))
        if length > 6 and rng.random() < 0.4:
            sent[length // 2] += ","
        text = " ".join(sent).capitalize() + ("." if rng.random() < 0.85 else "?")
        text += "\n" if rng.random() < 0.2 else " "
        out.append(text)
        size += len(text)
    return "".join(out).encode("ascii")[:n_bytes]
