"""Per-layer bottleneck autoencoders that map blended hidden states back
toward one expert's hidden states.

Layouts:
  gated   z = sigmoid(h Wg) * (h Wv) + bz,   h_hat = sigmoid(z Ug) * (z Uv) + bh
  plain   z = sigmoid(h W + bz),             h_hat = z U + bh
  dual2d  z = concat(gelu(causal_conv(h)), (h A) B + bg),   h_hat = z D + bd
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import substream
from .errors import ConfigError, DimensionError

LAYOUTS = ("gated", "plain", "dual2d")


def default_layers(n_layers, layout):
    """All layers for 1D layouts; a centred band of ~60% of layers for dual2d."""
    if layout != "dual2d":
        return tuple(range(1, n_layers + 1))
    band = max(1, int(round(0.6 * n_layers)))
    start = math.ceil((n_layers - band) / 2) + 1
    return tuple(range(start, start + band))


@dataclass
class AEConfig:
    hidden: int
    bottleneck: int | None = None
    layout: str = "gated"
    layers: tuple = ()
    kernel: int = 3
    b_local: int | None = None
    b_global: int | None = None
    rank: int = 8
    decoders: int = 1

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown autoencoder layout {self.layout!r}")
        if self.decoders not in (1, 2):
            raise ConfigError("decoders must be 1 or 2")
        self.layers = tuple(sorted(int(l) for l in self.layers))
        if any(l < 1 for l in self.layers):
            raise ConfigError("autoencoders cannot wrap the embedding layer (layer 0)")
        h = self.hidden
        if self.layout == "dual2d":
            if self.b_local is None:
                if self.bottleneck is None:
                    self.b_local, self.b_global = h // 2, h // 4
                else:
                    self.b_local = int(round(2 * self.bottleneck / 3))
                    self.b_global = self.bottleneck - self.b_local
            self.bottleneck = self.b_local + self.b_global
            if min(self.b_local, self.b_global, self.rank, self.kernel) < 1:
                raise ConfigError("dual2d widths, rank and kernel must be >= 1")
        else:
            if self.bottleneck is None:
                self.bottleneck = (3 * h) // 4
            if not 1 <= self.bottleneck < h:
                raise ConfigError(f"bottleneck {self.bottleneck} must satisfy 1 <= b < {h}")


def param_count(h, b, layout="gated", kernel=3, b_local=None, b_global=None, rank=8, decoders=1):
    """Number of parameters in one autoencoder."""
    if layout == "gated":
        return 4 * h * b + h + b + (decoders - 1) * (2 * b * h + h)
    if layout == "plain":
        return 2 * h * b + h + b + (decoders - 1) * (b * h + h)
    if layout == "dual2d":
        if b_local is None:
            b_local = int(round(2 * b / 3))
            b_global = b - b_local
        width = b_local + b_global
        local = kernel * h * b_local + b_local
        glob = h * rank + rank * b_global + b_global
        dec = width * h + h
        return local + glob + decoders * dec
    raise ConfigError(f"unknown autoencoder layout {layout!r}")


def _shapes(cfg):
    h, b = cfg.hidden, cfg.bottleneck
    if cfg.layout == "gated":
        enc = {"enc.wg": (h, b), "enc.wv": (h, b), "enc.b": (b,)}
        dec = {"wg": (b, h), "wv": (b, h), "b": (h,)}
    elif cfg.layout == "plain":
        enc = {"enc.w": (h, b), "enc.b": (b,)}
        dec = {"w": (b, h), "b": (h,)}
    else:
        enc = {"local.w": (cfg.kernel, h, cfg.b_local), "local.b": (cfg.b_local,),
               "global.a": (h, cfg.rank), "global.w": (cfg.rank, cfg.b_global),
               "global.b": (cfg.b_global,)}
        dec = {"w": (b, h), "b": (h,)}
    out = dict(enc)
    for d in range(cfg.decoders):
        out.update({f"dec{d}.{k}": s for k, s in dec.items()})
    return out


def _fan_in(name, shape):
    if name == "local.w":
        return shape[0] * shape[1]
    return shape[0]


def init_autoencoder(cfg, rng):
    params = {}
    for name, shape in _shapes(cfg).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0, 1 / math.sqrt(_fan_in(name, shape)), shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
    return params


def _decode(p, z, labels, n_dec, decode_one):
    if n_dec == 1:
        return decode_one("dec0", z)
    if labels is None:
        raise ConfigError("two decoders need a domain label per sequence")
    sel = np.asarray(labels, dtype=z.data.dtype).reshape(-1, 1, 1)
    if sel.shape[0] != z.shape[0]:
        raise DimensionError("one label per sequence required")
    return (1.0 - sel) * decode_one("dec0", z) + sel * decode_one("dec1", z)


def encode_decode_1d(p, h, labels=None, layout="gated", decoders=1):
    """Gated (or plain) 1D autoencoder applied per position. Returns (z, h_hat)."""
    if h.shape[-1] != (p["enc.wg"] if layout == "gated" else p["enc.w"]).shape[0]:
        raise DimensionError(f"hidden size {h.shape[-1]} does not match autoencoder input")
    if layout == "gated":
        z = ag.sigmoid(ag.affine(h, p["enc.wg"])) * ag.affine(h, p["enc.wv"]) + p["enc.b"]

        def dec(pre, z):
            return ag.sigmoid(ag.affine(z, p[f"{pre}.wg"])) * ag.affine(z, p[f"{pre}.wv"]) + p[f"{pre}.b"]
    else:
        z = ag.sigmoid(ag.affine(h, p["enc.w"], p["enc.b"]))

        def dec(pre, z):
            return ag.affine(z, p[f"{pre}.w"], p[f"{pre}.b"])
    return z, _decode(p, z, labels, decoders, dec)


def encode_decode_2d(p, h, labels=None, decoders=1):
    """Dual-pathway autoencoder over a (batch, seq, hidden) block. Returns (z, h_hat)."""
    if h.ndim != 3:
        raise DimensionError("dual-pathway autoencoder expects (batch, seq, hidden)")
    if h.shape[-1] != p["global.a"].shape[0]:
        raise DimensionError(f"hidden size {h.shape[-1]} does not match autoencoder input")
    if h.shape[1] < p["local.w"].shape[0]:
        raise ValueError(f"sequence length {h.shape[1]} shorter than kernel width {p['local.w'].shape[0]}")
    z_local = ag.gelu(ag.conv1d(h, p["local.w"], p["local.b"]))
    z_global = ag.affine(ag.affine(h, p["global.a"]), p["global.w"], p["global.b"])
    z = ag.concat([z_local, z_global], axis=-1)

    def dec(pre, z):
        return ag.affine(z, p[f"{pre}.w"], p[f"{pre}.b"])
    return z, _decode(p, z, labels, decoders, dec)


@dataclass
class AutoencoderStack:
    config: AEConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, seed=0):
        rng = substream(seed, "ae-init")
        return cls(config, {l: init_autoencoder(config, rng) for l in config.layers})

    @property
    def layers(self):
        return self.config.layers

    def has(self, l):
        return l in self.params

    def apply(self, l, h, labels=None):
        p = self.params[l]
        if self.config.layout == "dual2d":
            return encode_decode_2d(p, h, labels, self.config.decoders)
        return encode_decode_1d(p, h, labels, self.config.layout, self.config.decoders)

    def parameters(self):
        return {f"ae.layer{l}.{k}": t for l, p in self.params.items() for k, t in p.items()}

    def n_params(self, l=None):
        layers = [l] if l is not None else list(self.params)
        return int(sum(t.size for ll in layers for t in self.params[ll].values()))

    def param_count(self):
        c = self.config
        return param_count(c.hidden, c.bottleneck, c.layout, c.kernel, c.b_local, c.b_global, c.rank, c.decoders)

    def to_named(self):
        out = {k: t.data for k, t in self.parameters().items()}
        c = self.config
        out["ae.meta"] = np.array([LAYOUTS.index(c.layout), c.hidden, c.bottleneck, c.kernel,
                                   c.b_local or 0, c.b_global or 0, c.rank, c.decoders], dtype=np.float32)
        out["ae.layers"] = np.array(c.layers, dtype=np.float32)
        return out

    @classmethod
    def from_named(cls, named):
        layout_i, h, b, kernel, bl, bg, rank, dec = (int(v) for v in named["ae.meta"])
        layers = tuple(int(v) for v in np.atleast_1d(named["ae.layers"]))
        layout = LAYOUTS[layout_i]
        cfg = AEConfig(h, b, layout, layers, kernel, bl or None, bg or None, rank, dec)
        params = {}
        for l in layers:
            prefix = f"ae.layer{l}."
            params[l] = {k[len(prefix):]: Tensor(v, requires_grad=True, dtype=np.float32)
                         for k, v in named.items() if k.startswith(prefix)}
        return cls(cfg, params)
