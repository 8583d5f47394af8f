"""B-spline blending schedule alpha(l) and the hard parameter merge."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .model import ModelParams, layer_of


class DomainError(ValueError):
    pass


def clamped_uniform_knots(n_ctrl, degree, lo, hi):
    """Knot vector with ``degree + 1`` repeated end knots and uniform interior."""
    if n_ctrl < degree + 1:
        raise ConfigError(f"need at least degree+1={degree + 1} control points, got {n_ctrl}")
    n_inner = n_ctrl - degree - 1
    inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    return np.concatenate([np.full(degree + 1, float(lo)), inner, np.full(degree + 1, float(hi))])


def basis_row(x, degree, knots, n_ctrl):
    """Cox-de Boor values B_{i,degree}(x) for i = 0..n_ctrl-1.

    The right end of the knot span is included by evaluating it on the last
    non-empty interval, so the weights sum to one on the whole closed span.
    """
    t = np.asarray(knots, dtype=np.float64)
    if len(t) != n_ctrl + degree + 1:
        raise ConfigError(f"knot vector of length {len(t)} does not fit {n_ctrl} control points of degree {degree}")
    if np.any(np.diff(t) < 0):
        raise ConfigError("knot vector must be non-decreasing")
    x = float(x)
    if not t[0] <= x <= t[-1]:
        raise DomainError(f"{x} outside knot span [{t[0]}, {t[-1]}]")
    if x == t[-1]:
        span = int(np.nonzero(t[:-1] < t[1:])[0][-1])
    else:
        span = int(np.searchsorted(t, x, side="right") - 1)
    B = np.zeros(len(t) - 1)
    B[span] = 1.0
    for p in range(1, degree + 1):
        nxt = np.zeros(len(t) - 1 - p)
        for i in range(len(nxt)):
            left = t[i + p] - t[i]
            right = t[i + p + 1] - t[i + 1]
            v = 0.0
            if left > 0:
                v += (x - t[i]) / left * B[i]
            if right > 0:
                v += (t[i + p + 1] - x) / right * B[i + 1]
            nxt[i] = v
        B = nxt
    return B


@dataclass
class AlphaSchedule:
    """Trainable control points and per-layer biases for alpha(l).

    1D mode: control (N,), bias (L,); alpha(l) is a scalar.
    2D mode: control (N, h), bias (L, h); alpha(l) is an h-vector.
    """
    control: Tensor
    bias: Tensor
    degree: int
    n_layers: int
    mode: str = "1d"
    knots: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mode not in ("1d", "2d"):
            raise ConfigError(f"unknown alpha mode {self.mode!r}")
        n = self.control.shape[0]
        if self.knots is None:
            self.knots = clamped_uniform_knots(n, self.degree, 1, self.n_layers)
        want_c = 1 if self.mode == "1d" else 2
        if self.control.ndim != want_c or self.bias.ndim != want_c:
            raise ConfigError(f"{self.mode} schedule needs {want_c}-d control points and biases")
        if self.bias.shape[0] != self.n_layers:
            raise ConfigError(f"expected {self.n_layers} layer biases, got {self.bias.shape[0]}")
        if self.mode == "2d" and self.control.shape[1] != self.bias.shape[1]:
            raise ConfigError("control points and biases disagree on hidden size")
        self._basis = np.stack([basis_row(l, self.degree, self.knots, n)
                                for l in range(1, self.n_layers + 1)])

    @classmethod
    def init(cls, n_layers, n_ctrl=8, degree=3, mode="1d", hidden=None, c0=0.5, b0=0.0):
        shape_c = (n_ctrl,) if mode == "1d" else (n_ctrl, hidden)
        shape_b = (n_layers,) if mode == "1d" else (n_layers, hidden)
        return cls(Tensor(np.full(shape_c, c0), requires_grad=True),
                   Tensor(np.full(shape_b, b0), requires_grad=True),
                   degree, n_layers, mode)

    @property
    def n_ctrl(self):
        return self.control.shape[0]

    @property
    def hidden(self):
        return None if self.mode == "1d" else self.control.shape[1]

    def basis_matrix(self):
        return self._basis

    def alpha_all(self):
        """Tensor of alpha for layers 1..L, shape (L,) or (L, h)."""
        B = self._basis.astype(self.control.data.dtype)
        if self.mode == "1d":
            raw = ag.reshape(ag.matmul(B, ag.reshape(self.control, (-1, 1))), (-1,))
        else:
            raw = ag.matmul(B, self.control)
        return ag.clamp(raw + self.bias, 0.0, 1.0)

    def alpha(self, l):
        if not 1 <= l <= self.n_layers:
            raise DomainError(f"layer {l} outside 1..{self.n_layers}")
        with ag.no_grad():
            return self.alpha_all().data[l - 1]

    def parameters(self):
        return {"alpha.control": self.control, "alpha.bias": self.bias}

    def snapshot(self):
        return {"mode": self.mode, "degree": self.degree, "n_ctrl": self.n_ctrl,
                "control": self.control.data.copy(), "bias": self.bias.data.copy()}

    def to_named(self):
        """Flat name -> array map for the checkpoint file."""
        out = {f"alpha.control.{i}": self.control.data[i] for i in range(self.n_ctrl)}
        out.update({f"alpha.bias.{l}": self.bias.data[l - 1] for l in range(1, self.n_layers + 1)})
        out["alpha.meta"] = np.array([1 if self.mode == "1d" else 2, self.degree, self.n_ctrl,
                                      self.n_layers, self.hidden or 0], dtype=np.float32)
        return out

    @classmethod
    def from_named(cls, named):
        mode_code, degree, n_ctrl, n_layers, _ = (int(v) for v in named["alpha.meta"])
        control = np.stack([named[f"alpha.control.{i}"] for i in range(n_ctrl)])
        bias = np.stack([named[f"alpha.bias.{l}"] for l in range(1, n_layers + 1)])
        return cls(Tensor(control, requires_grad=True, dtype=np.float32),
                   Tensor(bias, requires_grad=True, dtype=np.float32),
                   degree, n_layers, "1d" if mode_code == 1 else "2d")


@dataclass
class MergedParams(ModelParams):
    provenance: dict = field(default_factory=dict)


def _alpha_for(shape, a, hidden):
    """Broadcast a per-layer alpha onto one parameter tensor.

    Weight matrices are stored (in, out). An h-vector alpha runs along the
    output axis when it has size h, otherwise along the input axis when that
    has size h; hidden-size vectors take it elementwise; anything else uses
    the mean of alpha.
    """
    if a.ndim == 0:
        return a
    if len(shape) == 1:
        return a if shape[0] == hidden else ag.mean(a)
    if shape[-1] == hidden:
        return a
    if shape[0] == hidden:
        return ag.reshape(a, (hidden, 1))
    return ag.mean(a)


def blend(base, fine, a):
    """Elementwise ``(1 - a) * base + a * fine``; exact at a = 0 and a = 1."""
    return (1.0 - a) * base + a * fine


def merge_params(base, fine, schedule, global_source="base"):
    """Per-layer convex combination of two experts under ``schedule``.

    Stays differentiable w.r.t. the schedule when called with gradients on.
    Non-layer tensors (embeddings, final layer norm) come from
    ``global_source``: "base", "fine" or "average".
    """
    if base.config != fine.config:
        raise DimensionError("experts have different model configs")
    if schedule.n_layers != base.config.n_layers:
        raise DimensionError(f"schedule covers {schedule.n_layers} layers, model has {base.config.n_layers}")
    hidden = base.config.hidden
    if schedule.mode == "2d" and schedule.hidden != hidden:
        raise ConfigError(f"2D schedule width {schedule.hidden} != hidden size {hidden}")
    bt, ft = base.arrays(), fine.arrays()
    if bt.keys() != ft.keys() or any(bt[k].shape != ft[k].shape for k in bt):
        raise DimensionError("experts have mismatched parameter structure")
    alphas = schedule.alpha_all()
    out = {}
    for name, b_arr in bt.items():
        l = layer_of(name)
        if l is None:
            if global_source == "base":
                out[name] = b_arr
            elif global_source == "fine":
                out[name] = ft[name]
            elif global_source == "average":
                out[name] = blend(b_arr, ft[name], np.float32(0.5))
            else:
                raise ConfigError(f"unknown global parameter source {global_source!r}")
            continue
        a = alphas[l - 1]
        a = _alpha_for(b_arr.shape, a, hidden)
        out[name] = blend(b_arr, ft[name], a)
    return MergedParams(base.config, out, provenance=schedule.snapshot())


def constant_schedule(n_layers, value, mode="1d", hidden=None, n_ctrl=8, degree=3):
    """Schedule with alpha(l) == value everywhere (bias carries the value)."""
    sched = AlphaSchedule.init(n_layers, n_ctrl, degree, mode, hidden, c0=0.0, b0=value)
    return sched
