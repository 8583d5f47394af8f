"""Decoder-only toy transformer with per-layer hidden-state traces."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import VOCAB_SIZE, substream
from .errors import ConfigError, InputError, NumericError

LAYER_TENSORS = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "mlp.wfc", "mlp.bfc", "mlp.wproj", "mlp.bproj",
)
GLOBAL_TENSORS = ("wte", "wpe", "lnf.g", "lnf.b")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    hidden: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    context: int = 64
    vocab: int = VOCAB_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers")
        if self.context < 2:
            raise ConfigError("context length must be >= 2")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.n_heads} heads")

    def shapes(self):
        h, f = self.hidden, self.hidden * self.ff_mult
        per_layer = {
            "ln1.g": (h,), "ln1.b": (h,),
            "attn.wq": (h, h), "attn.bq": (h,), "attn.wk": (h, h), "attn.bk": (h,),
            "attn.wv": (h, h), "attn.bv": (h,), "attn.wo": (h, h), "attn.bo": (h,),
            "ln2.g": (h,), "ln2.b": (h,),
            "mlp.wfc": (h, f), "mlp.bfc": (f,), "mlp.wproj": (f, h), "mlp.bproj": (h,),
        }
        out = {"wte": (self.vocab, h), "wpe": (self.context, h)}
        for l in range(1, self.n_layers + 1):
            for k, s in per_layer.items():
                out[f"layer{l}.{k}"] = s
        out["lnf.g"] = (h,)
        out["lnf.b"] = (h,)
        return out

    def to_dict(self):
        return asdict(self)


def layer_of(name):
    """Layer index encoded in a parameter name, or ``None`` for global tensors."""
    if name.startswith("layer"):
        return int(name[5:name.index(".")])
    return None


@dataclass
class ModelParams:
    """Named parameters of one transformer. Values are numpy arrays or Tensors."""
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def arrays(self):
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.tensors.items()}

    def layer(self, l):
        prefix = f"layer{l}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays().items()})

    def as_leaves(self):
        """Fresh trainable Tensors for every parameter."""
        return {k: Tensor(v.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.arrays().items()}

    def checksum(self):
        h = hashlib.sha256()
        for k, v in sorted(self.arrays().items()):
            v = np.ascontiguousarray(v)
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(repr(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def n_params(self):
        return int(sum(v.size for v in self.arrays().values()))


def init_params(config, rng=None):
    rng = rng if rng is not None else substream(config.seed, "init")
    std = 0.02
    proj_std = std / math.sqrt(2 * config.n_layers)
    out = {}
    for name, shape in config.shapes().items():
        if name.endswith((".g",)):
            arr = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".bfc", ".bproj")):
            arr = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.wproj")):
            arr = rng.normal(0, proj_std, shape)
        else:
            arr = rng.normal(0, std, shape)
        out[name] = arr.astype(np.float32)
    return ModelParams(config, out)


@dataclass
class HiddenTrace:
    """Hidden states per layer. Index 0 is the embedding output.

    ``hidden[l]`` is the block output h_l; ``reconstructed[l]`` is what the next
    block consumes (the autoencoder output where one is attached, else h_l).
    """
    hidden: list
    reconstructed: list
    codes: dict
    labels: np.ndarray | None = None

    def h(self, l):
        return self.hidden[l].data

    def h_hat(self, l):
        return self.reconstructed[l].data


def _causal_mask(T, dtype):
    return np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)


def _check_tokens(config, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2 or tokens.dtype.kind not in "iu":
        raise InputError("tokens must be an integer array of shape (batch, seq)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise InputError(f"token id out of range [0, {config.vocab})")
    if tokens.shape[1] > config.context:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds context {config.context}")
    if tokens.shape[1] == 0:
        raise InputError("empty sequence")
    return tokens.astype(np.int64)


def block(x, p, config, mask):
    """One pre-norm transformer block; ``p`` holds the layer's tensors by short name."""
    B, T, h = x.shape
    H = config.n_heads
    d = h // H

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, T, H, d)), (0, 2, 1, 3))

    a = ag.layer_norm(x, p["ln1.g"], p["ln1.b"])
    q = heads(ag.affine(a, p["attn.wq"], p["attn.bq"]))
    k = heads(ag.affine(a, p["attn.wk"], p["attn.bk"]))
    v = heads(ag.affine(a, p["attn.wv"], p["attn.bv"]))
    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    att = ag.softmax(scores + mask, axis=-1)
    y = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, T, h))
    x = x + ag.affine(y, p["attn.wo"], p["attn.bo"])
    m = ag.layer_norm(x, p["ln2.g"], p["ln2.b"])
    m = ag.affine(ag.gelu(ag.affine(m, p["mlp.wfc"], p["mlp.bfc"])), p["mlp.wproj"], p["mlp.bproj"])
    return x + m


def forward_with_trace(params, tokens, autoencoders=None, schedule=None, fine=None, labels=None):
    """Run the model and record every layer's hidden state.

    With ``schedule`` and ``fine`` given, each layer instead runs both the
    ``params`` (base) block and the ``fine`` block on the same input and blends
    their outputs with alpha(l) (hidden-state blending).
    Embedding and final layer norm always come from ``params``.
    """
    config = params.config
    tokens = _check_tokens(config, tokens)
    T = tokens.shape[1]
    p = params.tensors
    if autoencoders is not None:
        missing = [l for l in autoencoders.layers if not autoencoders.has(l)]
        if missing:
            raise ConfigError(f"no autoencoder parameters for configured layers {missing}")
        bad = [l for l in autoencoders.layers if not 1 <= l <= config.n_layers]
        if bad:
            raise ConfigError(f"autoencoder layers {bad} outside 1..{config.n_layers}")
    if schedule is not None and fine is None:
        raise ConfigError("hidden-state blending needs both expert parameter sets")

    dtype = p["wte"].data.dtype if isinstance(p["wte"], Tensor) else np.asarray(p["wte"]).dtype
    x = ag.embedding(p["wte"], tokens) + ag.getitem(ag.as_tensor(p["wpe"]), slice(0, T))
    mask = _causal_mask(T, dtype)
    hidden, recon, codes = [x], [x], {}
    alphas = schedule.alpha_all() if schedule is not None else None
    for l in range(1, config.n_layers + 1):
        h = block(x, params.layer(l), config, mask)
        if schedule is not None:
            h_fine = block(x, fine.layer(l), config, mask)
            a = alphas[l - 1]
            h = (1.0 - a) * h + a * h_fine
        hidden.append(h)
        if autoencoders is not None and l in autoencoders.layers:
            z, h = autoencoders.apply(l, h, labels)
            codes[l] = z
        recon.append(h)
        x = h
    x = ag.layer_norm(x, p["lnf.g"], p["lnf.b"])
    logits = ag.matmul(x, ag.transpose(ag.as_tensor(p["wte"]), (1, 0)))
    lab = None if labels is None else np.asarray(labels)
    return logits, HiddenTrace(hidden, recon, codes, lab)


def logits_of(params, tokens, **kw):
    with ag.no_grad():
        return forward_with_trace(params, tokens, **kw)[0].data


@dataclass
class ExpertTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 50
    grad_clip: float = 1.0
    seed: int = 0


def train_expert(corpus, config, train=None, init=None, log=None):
    """Train (or fine-tune from ``init``) a model on one corpus.

    Returns ``(params, losses)`` where ``losses`` holds the training
    cross-entropy at every step.
    """
    train = train or ExpertTrainConfig()
    if corpus.train_end < corpus.chunk_len:
        raise InputError(f"corpus {corpus.domain!r} has no training data")
    if init is None:
        init = init_params(config)
    elif init.config != config:
        raise ConfigError("init parameters were built for a different model config")
    leaves = init.as_leaves()
    opt = ag.Adam(leaves, lr=train.lr, beta1=0.9, beta2=0.98)
    rng = substream(train.seed, f"expert-batches:{corpus.domain}")
    losses = []
    for step in range(train.steps):
        win = corpus.random_train_batch(rng, train.batch_size)
        logits, _ = forward_with_trace(ModelParams(config, leaves), win[:, :-1])
        loss = ag.cross_entropy(logits, win[:, 1:])
        if not np.isfinite(loss.data):
            raise NumericError(f"expert training diverged at step {step}")
        ag.backward(loss)
        ag.clip_grad_norm(list(leaves.values()), train.grad_clip)
        lr = train.lr * min(1.0, (step + 1) / max(train.warmup, 1))
        opt.step(lr=lr)
        opt.zero_grad()
        losses.append(float(loss.data))
        if log is not None:
            log(step, losses[-1])
    params = ModelParams(config, {k: v.data.copy() for k, v in leaves.items()})
    return params, losses
