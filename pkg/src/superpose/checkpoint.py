"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"SPTX1"  u8 version  u32 n_entries
    per entry:
      u16 name_len  name (UTF-8)  u8 dtype (1 = float32)  u8 rank  u32 dims[rank]
      float32 payload, C order
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .model import ModelConfig, ModelParams

MAGIC = b"SPTX1"
VERSION = 1
DTYPE_F32 = 1


def _encode(artifacts):
    parts = [MAGIC, struct.pack("<BI", VERSION, len(artifacts))]
    for name, arr in artifacts.items():
        a = np.asarray(arr, dtype=np.float32, order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if a.ndim > 255:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<BB{a.ndim}I", DTYPE_F32, a.ndim, *a.shape))
        parts.append(a.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(artifacts, path):
    """Write ``{name: array}`` to ``path`` (atomically, via a temp file)."""
    path = Path(path)
    data = _encode(artifacts)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf):
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    r = _Reader(buf)
    r.pos = len(MAGIC)
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (count,) = r.unpack("<I", "entry count")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptionError("tensor name is not valid UTF-8", r.pos - n) from e
        dtype, rank = r.unpack("<BB", f"header of {name!r}")
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype} for {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes after last tensor", r.pos)
    return out


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# -- model helpers ----------------------------------------------------------

def _meta(config):
    s = int(config.seed)
    seed_words = [(s >> (16 * i)) & 0xFFFF for i in range(4)]
    return np.array([config.n_layers, config.hidden, config.n_heads, config.ff_mult,
                     config.context, config.vocab, *seed_words], dtype=np.float32)


def _config_from_meta(meta):
    v = [int(x) for x in meta]
    seed = sum(w << (16 * i) for i, w in enumerate(v[6:10]))
    return ModelConfig(n_layers=v[0], hidden=v[1], n_heads=v[2], ff_mult=v[3],
                       context=v[4], vocab=v[5], seed=seed)


def model_artifacts(params):
    out = {"model.meta": _meta(params.config)}
    out.update(params.arrays())
    return out


def params_from_artifacts(named):
    if "model.meta" not in named:
        raise FormatError("checkpoint has no model.meta entry")
    config = _config_from_meta(named["model.meta"])
    want = config.shapes()
    tensors = {k: named[k] for k in want if k in named}
    missing = sorted(set(want) - set(tensors))
    if missing:
        raise FormatError(f"checkpoint is missing model tensors: {missing[:5]}")
    return ModelParams(config, tensors)


def save_model(params, path):
    return save_checkpoint(model_artifacts(params), path)


def load_model(path):
    return params_from_artifacts(load_checkpoint(path))
