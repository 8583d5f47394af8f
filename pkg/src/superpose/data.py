"""Byte-level tokenizer, corpora and labelled batches."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InputError

PAD, BOS, EOS = 256, 257, 258
VOCAB_SIZE = 259

BASE_DOMAIN, FINE_DOMAIN = 0, 1


def substream(seed, name):
    """Independent generator for a named purpose ("init", "shuffle", ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def tokenize(text):
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids):
    """Inverse of :func:`tokenize`. Special tokens are dropped."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise InputError(f"token id out of range [0, {VOCAB_SIZE})")
    return ids[ids < 256].astype(np.uint8).tobytes()


def bundled_corpus_path(name):
    return resources.files("superpose").joinpath("corpora").joinpath(f"{name}.txt")


@dataclass
class Corpus:
    domain: str
    text: bytes
    tokens: np.ndarray
    chunk_len: int
    train_end: int
    val_chunks: int = field(default=0)

    @classmethod
    def from_text(cls, domain, text, context, val_fraction=0.1):
        """Split ``text`` into contiguous chunks of ``context + 1`` tokens.

        The trailing ``val_fraction`` of chunks is held out for validation.
        """
        if isinstance(text, str):
            text = text.encode("utf-8")
        tokens = tokenize(text)
        chunk = context + 1
        n_chunks = len(tokens) // chunk
        if n_chunks < 2:
            raise InputError(f"corpus {domain!r} is too short for context {context}")
        n_val = max(1, int(round(val_fraction * n_chunks)))
        train_end = (n_chunks - n_val) * chunk
        return cls(domain, bytes(text), tokens, chunk, train_end, n_val)

    @classmethod
    def from_file(cls, domain, path, context, val_fraction=0.1):
        if str(path).startswith("bundled:"):
            data = bundled_corpus_path(str(path).split(":", 1)[1]).read_bytes()
        else:
            data = Path(path).read_bytes()
        if not data:
            raise InputError(f"corpus file {path} is empty")
        return cls.from_text(domain, data, context, val_fraction)

    @property
    def train_tokens(self):
        return self.tokens[:self.train_end]

    def train_windows(self, stride=None):
        """Fixed training windows of ``chunk_len`` tokens."""
        stride = stride or self.chunk_len - 1
        toks = self.train_tokens
        starts = range(0, len(toks) - self.chunk_len + 1, stride)
        return np.stack([toks[s:s + self.chunk_len] for s in starts])

    def val_windows(self):
        start = self.train_end
        return self.tokens[start:start + self.val_chunks * self.chunk_len].reshape(self.val_chunks, self.chunk_len)

    def random_train_batch(self, rng, batch_size):
        toks = self.train_tokens
        starts = rng.integers(0, len(toks) - self.chunk_len + 1, size=batch_size)
        return np.stack([toks[s:s + self.chunk_len] for s in starts])


@dataclass
class LabeledBatch:
    """Token windows with one domain label per sequence."""
    windows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.int64)
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (len(self.windows),):
            raise InputError("every sequence needs exactly one domain label")
        if self.labels.dtype.kind not in "iub" or not np.isin(self.labels, (BASE_DOMAIN, FINE_DOMAIN)).all():
            raise InputError("labels must be 0 (base domain) or 1 (fine domain)")
        self.labels = self.labels.astype(np.int64)

    @property
    def inputs(self):
        return self.windows[:, :-1]

    @property
    def targets(self):
        return self.windows[:, 1:]

    def __len__(self):
        return len(self.windows)


def mixed_stream(base_windows, fine_windows, repeat=(1, 1)):
    """Concatenate both domains' windows (each repeated) with their labels."""
    wins = [base_windows] * repeat[0] + [fine_windows] * repeat[1]
    labels = [np.full(len(base_windows), BASE_DOMAIN)] * repeat[0] + \
             [np.full(len(fine_windows), FINE_DOMAIN)] * repeat[1]
    return LabeledBatch(np.concatenate(wins), np.concatenate(labels))


def iterate_epoch(stream, batch_size, rng):
    order = rng.permutation(len(stream))
    for i in range(0, len(order), batch_size):
        idx = np.sort(order[i:i + batch_size])
        yield LabeledBatch(stream.windows[idx], stream.labels[idx])
