"""Training objectives: reconstruction, language modelling, alpha regularisation."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError


@dataclass
class LossWeights:
    lm: float = 1.0
    recon: float = 1.0
    mse: float = 1.0
    l2: float = 0.1
    smoothness: float = 1.0
    centrality: float = 1.0
    mean_bias: float = 1.0
    variance_bias: float = 1.0
    alpha_reg: float = 0.01
    target_variance: float = 0.01

    def __post_init__(self):
        bad = [k for k, v in asdict(self).items() if not (v >= 0 and math.isfinite(v))]
        if bad:
            raise ConfigError(f"loss weights must be finite and >= 0: {bad}")


def recon_loss(reconstructed, targets, weights):
    """Sum over layers of ``mse * mean(r**2) + l2 * ||r||`` with r = h_hat - target.

    ``reconstructed`` maps layer -> Tensor, ``targets`` maps layer -> array.
    The norm is taken over the whole layer residual of the batch.
    """
    total = None
    for l, h_hat in reconstructed.items():
        if l not in targets:
            raise ConfigError(f"no reconstruction target for layer {l}")
        r = h_hat - np.asarray(targets[l], dtype=h_hat.data.dtype)
        sq = r * r
        term = weights.mse * ag.mean(sq) + weights.l2 * ag.sqrt(ag.sum(sq))
        total = term if total is None else total + term
    if total is None:
        return ag.Tensor(0.0)
    return total


def lm_loss(logits, targets):
    return ag.cross_entropy(logits, targets)


def perplexity_from_loss(loss):
    return math.exp(float(loss.data if isinstance(loss, ag.Tensor) else loss))


def alpha_reg(schedule, weights):
    """Weighted alpha regulariser and its four components.

    Bias statistics are taken over layers; in 2D mode they are computed per
    hidden dimension and averaged across dimensions.
    """
    c, b = schedule.control, schedule.bias
    n = c.shape[0]
    if n > 1:
        d = ag.getitem(c, slice(1, None)) - ag.getitem(c, slice(0, n - 1))
        smooth = ag.sum(d * d)
    else:
        smooth = ag.sum(c * 0.0)
    central = ag.sum(c * c)
    mu = ag.mean(b, axis=0)
    mean_bias = ag.mean(mu * mu)
    dev = b - mu
    var = ag.mean(dev * dev, axis=0)
    gap = var - weights.target_variance
    var_bias = ag.mean(gap * gap)
    total = (weights.smoothness * smooth + weights.centrality * central
             + weights.mean_bias * mean_bias + weights.variance_bias * var_bias)
    parts = {"smoothness": float(smooth.data), "centrality": float(central.data),
             "mean_bias": float(mean_bias.data), "variance_bias": float(var_bias.data)}
    return total, parts


def total_loss(mode, components, weights):
    """Combine component losses for the 1D or 2D objective.

    ``components`` holds Tensors under "lm", "recon" and optionally "alpha_reg".
    """
    if mode not in ("1d", "2d"):
        raise ConfigError(f"unknown mode {mode!r}")
    total = weights.recon * components["recon"] + weights.lm * components["lm"]
    if mode == "2d":
        total = total + weights.alpha_reg * components["alpha_reg"]
    elif components.get("alpha_reg") is not None and weights.alpha_reg > 0:
        warnings.warn("alpha regularisation is not part of the 1D objective; ignoring it", stacklevel=2)
    return total
