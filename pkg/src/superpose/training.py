"""Joint training of the blending schedule and layer autoencoders, plus the
linear-interpolation and task-arithmetic baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autoencoder import AEConfig, AutoencoderStack, default_layers
from .bspline import AlphaSchedule, blend, merge_params
from .data import FINE_DOMAIN, LabeledBatch, iterate_epoch, substream
from .errors import DimensionError, InputError, NumericError
from .losses import LossWeights, alpha_reg, lm_loss, recon_loss, total_loss
from .model import ModelParams, forward_with_trace

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "L_total", "L_LM", "L_Recon", "L_AlphaReg",
               "smoothness", "centrality", "mean_bias", "variance_bias",
               "alpha_mean", "alpha_min", "alpha_max")


@dataclass
class TrainRunConfig:
    mode: str = "1d"
    epochs: int = 12
    batch_size: int = 16
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    layout: str | None = None
    bottleneck: int | None = None
    ae_layers: tuple | None = None
    decoders: int = 1
    n_ctrl: int = 8
    degree: int = 3
    global_source: str = "base"
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch size must be >= 1")
        if self.mode not in ("1d", "2d"):
            raise InputError(f"unknown mode {self.mode!r}")

    def ae_config(self, model_config):
        layout = self.layout or ("gated" if self.mode == "1d" else "dual2d")
        layers = self.ae_layers if self.ae_layers is not None else default_layers(model_config.n_layers, layout)
        return AEConfig(model_config.hidden, self.bottleneck, layout, tuple(layers), decoders=self.decoders)


@dataclass
class SuperposedModel:
    """Hard-merged parameters plus the autoencoders that ride on top of them."""
    params: ModelParams
    autoencoders: AutoencoderStack
    schedule: AlphaSchedule

    @property
    def config(self):
        return self.params.config

    @classmethod
    def build(cls, base, fine, schedule, autoencoders, global_source="base"):
        with ag.no_grad():
            merged = merge_params(base, fine, schedule, global_source)
        arrays = ModelParams(base.config, merged.arrays())
        return cls(arrays, autoencoders, schedule)

    def forward(self, tokens, labels=None):
        with ag.no_grad():
            return forward_with_trace(self.params, tokens, self.autoencoders, labels=labels)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    target_sources: list = field(default_factory=list)

    def as_table(self):
        return [[r[c] for c in LOG_COLUMNS] for r in self.rows]


@dataclass
class TrainResult:
    schedule: AlphaSchedule
    autoencoders: AutoencoderStack
    log: TrainingLog


def select_targets(trace_base, trace_fine, labels, layers):
    """Per-sample reconstruction targets: fine-domain rows take the fine expert."""
    sel = (np.asarray(labels) == FINE_DOMAIN)[:, None, None]
    return {l: np.where(sel, trace_fine.h(l), trace_base.h(l)) for l in layers}


def superposition_step(base, fine, schedule, aes, batch, config):
    """Forward one labelled batch and return (total, parts, merged trace)."""
    x = batch.inputs
    with ag.no_grad():
        _, tb = forward_with_trace(base, x)
        _, tf = forward_with_trace(fine, x)
    merged = merge_params(base, fine, schedule, config.global_source)
    logits, trace = forward_with_trace(merged, x, aes, labels=batch.labels)
    targets = select_targets(tb, tf, batch.labels, aes.layers)
    parts = {
        "lm": lm_loss(logits, batch.targets),
        "recon": recon_loss({l: trace.reconstructed[l] for l in aes.layers}, targets, config.weights),
    }
    reg_parts = {}
    if config.mode == "2d":
        parts["alpha_reg"], reg_parts = alpha_reg(schedule, config.weights)
    total = total_loss(config.mode, parts, config.weights)
    return total, parts, reg_parts, trace


def _check_experts(base, fine):
    if base.config != fine.config:
        raise DimensionError("base and fine experts have different configurations")
    a, b = base.arrays(), fine.arrays()
    if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
        raise DimensionError("base and fine experts have mismatched parameter shapes")
    for p in (base, fine):
        if any(isinstance(v, ag.Tensor) and v.requires_grad for v in p.tensors.values()):
            raise InputError("expert parameters must be frozen (no gradient tracking)")


def train_superposed(base, fine, data, config, epoch_hook=None):
    """Learn control points, layer biases and autoencoders on labelled data.

    ``data`` is a :class:`LabeledBatch` holding the whole mixed training
    stream; it is reshuffled each epoch. ``epoch_hook(epoch, schedule, aes)``
    runs after every epoch and its returned dict is merged into that
    epoch's log record (used for validation JSD).
    """
    _check_experts(base, fine)
    if not isinstance(data, LabeledBatch):
        raise InputError("training data must be a LabeledBatch with one label per sequence")
    mcfg = base.config
    aes = AutoencoderStack.create(config.ae_config(mcfg), seed=config.seed)
    schedule = AlphaSchedule.init(mcfg.n_layers, config.n_ctrl, config.degree, config.mode,
                                  mcfg.hidden if config.mode == "2d" else None)
    trainable = dict(schedule.parameters())
    trainable.update(aes.parameters())
    opt = ag.Adam(trainable, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = substream(config.seed, "superpose-shuffle")
    tlog = TrainingLog()
    try:
        _run_epochs(base, fine, data, config, schedule, aes, trainable, opt, rng, tlog, epoch_hook)
    except Exception as e:
        # let callers persist whatever was logged before the failure
        e.partial_log = tlog
        raise
    return TrainResult(schedule, aes, tlog)


def _run_epochs(base, fine, data, config, schedule, aes, trainable, opt, rng, tlog, epoch_hook):
    step = 0
    for epoch in range(1, config.epochs + 1):
        for batch in iterate_epoch(data, config.batch_size, rng):
            try:
                total, parts, reg_parts, _ = superposition_step(base, fine, schedule, aes, batch, config)
                if not np.isfinite(total.data):
                    raise NumericError("non-finite loss")
                ag.backward(total)
            except NumericError as e:
                err = NumericError(f"step {step}: {e}", getattr(e, "node_id", None))
                err.step = step
                raise err from e
            if config.grad_clip:
                ag.clip_grad_norm(list(trainable.values()), config.grad_clip)
            opt.step()
            opt.zero_grad()
            tlog.target_sources.append(np.where(batch.labels == FINE_DOMAIN, "fine", "base"))
            if step % config.log_every == 0:
                a = _alpha_now(schedule)
                tlog.rows.append({
                    "step": step, "epoch": epoch,
                    "L_total": float(total.data), "L_LM": float(parts["lm"].data),
                    "L_Recon": float(parts["recon"].data),
                    "L_AlphaReg": float(parts["alpha_reg"].data) if "alpha_reg" in parts else 0.0,
                    "smoothness": reg_parts.get("smoothness", 0.0),
                    "centrality": reg_parts.get("centrality", 0.0),
                    "mean_bias": reg_parts.get("mean_bias", 0.0),
                    "variance_bias": reg_parts.get("variance_bias", 0.0),
                    "alpha_mean": float(a.mean()), "alpha_min": float(a.min()), "alpha_max": float(a.max()),
                })
            step += 1
        record = {"epoch": epoch, "alpha": _alpha_now(schedule).tolist(),
                  "mean_loss": float(np.mean([r["L_total"] for r in tlog.rows if r["epoch"] == epoch]))}
        if epoch_hook is not None:
            record.update(epoch_hook(epoch, schedule, aes))
        tlog.epochs.append(record)
        log.info("epoch %d: mean loss %.4f", epoch, record["mean_loss"])


def _alpha_now(schedule):
    with ag.no_grad():
        return schedule.alpha_all().data.copy()


def baseline_linear_merge(base, fine, alpha0):
    """Uniform interpolation of every parameter, layers and embeddings alike."""
    if not 0.0 <= alpha0 <= 1.0:
        raise InputError(f"interpolation weight {alpha0} outside [0, 1]")
    _check_experts(base, fine)
    a = np.float32(alpha0)
    fa = fine.arrays()
    return ModelParams(base.config, {k: blend(v, fa[k], a) for k, v in base.arrays().items()})


def baseline_task_arithmetic(base, fine, scale):
    """base + scale * (fine - base), evaluated as (1 - scale) * base + scale * fine."""
    if not np.isfinite(scale):
        raise InputError("task-vector scale must be finite")
    _check_experts(base, fine)
    s = np.float32(scale)
    fa = fine.arrays()
    return ModelParams(base.config, {k: (1 - s) * v + s * fa[k] for k, v in base.arrays().items()})


def task_vector(base, fine):
    fa = fine.arrays()
    return {k: fa[k] - v for k, v in base.arrays().items()}
