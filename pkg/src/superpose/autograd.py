"""Small reverse-mode autodiff engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a closure
computing the vector-Jacobian product. :func:`backward` walks the graph in
reverse topological order, so each node is visited once.

The op set is closed (see ``SUPPORTED_OPS``); anything the transformer, the
autoencoders and the losses need is expressed with these primitives.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

SUPPORTED_OPS = (
    "add", "sub", "neg", "mul", "div", "matmul", "affine", "softmax",
    "log_softmax", "layer_norm", "gelu", "tanh", "sigmoid", "exp", "log",
    "concat", "getitem", "reshape", "transpose", "clamp", "mean", "sum",
    "sqrt", "pow", "conv1d", "embedding", "cross_entropy",
)


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class GraphStateError(RuntimeError):
    pass


_state = {"grad": True, "dtype": np.float32, "check_finite": True}
_node_ids = itertools.count(1)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def float64():
    """Create new tensors in double precision (used by gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


def grad_enabled():
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "node_id")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.op = None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return pow(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes)


def _not_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, vjp, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.node_id = next(_node_ids)
    if _state["check_finite"] and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op} (node {out.node_id})", out.node_id)
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else Tensor(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.data.dtype), b
    return Tensor(a), Tensor(b)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def pow(a, p):
    """Elementwise power with a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def sqrt(a):
    # Subgradient 0 where the output is exactly 0, so norms of zero residuals stay finite.
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * 0.5 / safe, 0).astype(out.dtype),)
    return _make(out, (a,), vjp, "sqrt")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


_GELU_C = math.sqrt(2 / math.pi)


def gelu(a):
    """tanh approximation, as in GPT-2."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1 + t)

    def vjp(g):
        du = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)
    return _make(out, (a,), vjp, "gelu")


def clamp(a, lo, hi):
    """Hard clamp. Gradient is 1 strictly inside (lo, hi) and 0 elsewhere."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0).astype(g.dtype),), "clamp")


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(a.data[idx]), (a,), vjp, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        return ga, gb
    return _make(ad @ bd, (a, b), vjp, "matmul")


def affine(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp, "affine")


def conv1d(x, w, b=None):
    """Causal convolution along the sequence axis.

    ``x`` is (batch, seq, c_in), ``w`` is (width, c_in, c_out). The left edge is
    padded by repeating the first position, so output ``t`` only sees inputs
    ``<= t`` and a constant sequence maps to a constant sequence.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    width = w.shape[0]
    if x.shape[1] < width:
        raise ValueError(f"conv1d: sequence length {x.shape[1]} shorter than kernel width {width}")
    xd, wd = x.data, w.data
    T = xd.shape[1]
    pad = np.concatenate([np.repeat(xd[:, :1], width - 1, axis=1), xd], axis=1)
    # taps[j] covers input positions t - (width-1) + j
    out = None
    for j in range(width):
        term = pad[:, j:j + T] @ wd[j]
        out = term if out is None else out + term
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def vjp(g):
        gpad = np.zeros_like(pad)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(width):
            gpad[:, j:j + T] += g @ wd[j].T
            gw[j] = pad[:, j:j + T].reshape(-1, pad.shape[-1]).T @ g2
        gx = gpad[:, width - 1:].copy()
        gx[:, 0] += gpad[:, :width - 1].sum(axis=1)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp, "conv1d")


# --------------------------------------------------------------------------
# normalisation, softmax, embeddings, losses
# --------------------------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), vjp, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    n = xd.shape[-1]

    def vjp(g):
        gflat = g.reshape(-1, n)
        d_gain = (gflat * xhat.reshape(-1, n)).sum(axis=0)
        d_bias = gflat.sum(axis=0)
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, d_gain, d_bias
    return _make(out, (x, gain, bias), vjp, "layer_norm")


def normalize_rows(x, eps=1e-5):
    """The scale-free part of layer norm; exposed for inspection and tests."""
    xd = np.asarray(x, dtype=np.float64)
    xc = xd - xd.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def embedding(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V})")
    shape, dtype = table.shape, table.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)
    return _make(table.data[ids], (table,), vjp, "embedding")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size == 0:
        raise ValueError("cross_entropy over zero positions")
    if targets.min() < 0 or targets.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(t.size), t]
    n = t.size
    shape = logits.shape

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1
        return ((p * (g / n)).reshape(shape).astype(flat.dtype),)
    return _make(np.asarray(nll.mean(), dtype=flat.dtype), (logits,), vjp, "cross_entropy")


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Sets ``.grad`` on every reachable leaf that requires grad and returns a
    ``{leaf: grad}`` dict.
    """
    if not isinstance(loss, Tensor) or loss._vjp is None:
        raise GraphStateError("backward() needs the scalar output of a forward pass that tracks gradients")
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    return leaves


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction. Parameters are held by name."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads=None, lr=None):
        """Apply one update. ``grads`` maps names to arrays; defaults to ``.grad``."""
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(float(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads])))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def numerical_grad(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array (float64)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            fp = float(fn(*arrays))
            arr[i] = old - eps
            fm = float(fn(*arrays))
            arr[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def gradcheck(fn, arrays, eps=1e-5):
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` receives Tensors and returns a scalar Tensor. Runs in float64 and
    returns the worst relative error over all inputs.
    """
    with float64():
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        backward(loss)
        analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

        def scalar(*arrs):
            with no_grad():
                return fn(*[Tensor(a) for a in arrs]).item()
        numeric = numerical_grad(scalar, arrays, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
