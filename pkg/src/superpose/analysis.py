"""Evaluation metrics and probes: perplexity, accuracy, JSD against the expert
average, sparsity, polysemanticity, k-means neuron diversity, PCA."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import LabeledBatch
from .errors import ConfigError, InputError, NumericError
from .losses import lm_loss, perplexity_from_loss
from .model import ModelParams, forward_with_trace

EVAL_CHUNK = 32
ZERO_TOL = 1e-6
POLY_EPS = 1e-8


# -- running models ---------------------------------------------------------

def _as_batch(dataset):
    if isinstance(dataset, LabeledBatch):
        return dataset
    w = np.asarray(dataset)
    if w.ndim != 2:
        raise InputError("dataset must be a (n, seq+1) window array or a LabeledBatch")
    return LabeledBatch(w, np.zeros(len(w), dtype=np.int64))


def _forward(model, tokens, labels):
    """(logits, trace) for a parameter set, a superposed model, or a bare
    callable mapping tokens to logits (which yields no trace)."""
    with ag.no_grad():
        if callable(model) and not hasattr(model, "autoencoders"):
            return ag.Tensor(np.asarray(model(tokens))), None
        if isinstance(model, ModelParams):
            return forward_with_trace(model, tokens)
        return forward_with_trace(model.params, tokens, model.autoencoders, labels=labels)


def iter_outputs(model, dataset, chunk=EVAL_CHUNK):
    """Yield (logits, targets, trace, labels) chunk by chunk."""
    batch = _as_batch(dataset)
    if len(batch) == 0:
        raise InputError("empty evaluation dataset")
    for s in range(0, len(batch), chunk):
        w, lab = batch.windows[s:s + chunk], batch.labels[s:s + chunk]
        logits, trace = _forward(model, w[:, :-1], lab)
        yield logits.data, w[:, 1:], trace, lab


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def mean_nll(model, dataset):
    """Token-weighted mean cross-entropy, via the training loss in float64."""
    total, count = 0.0, 0
    with ag.float64(), ag.no_grad():
        for logits, tgt, _, _ in iter_outputs(model, dataset):
            total += float(lm_loss(ag.Tensor(logits.astype(np.float64)), tgt).data) * tgt.size
            count += tgt.size
    return total / count


def perplexity(model, dataset):
    return perplexity_from_loss(mean_nll(model, dataset))


def next_token_accuracy(model, dataset):
    hit, count = 0, 0
    for logits, tgt, _, _ in iter_outputs(model, dataset):
        hit += int((logits.argmax(-1) == tgt).sum())
        count += tgt.size
    return hit / count


# -- JSD --------------------------------------------------------------------

def _check_normalized(p, what):
    err = np.abs(p.sum(-1) - 1.0).max() if p.size else 0.0
    if not err <= 1e-6 or np.any(p < 0):
        raise NumericError(f"{what} distribution does not normalize (max error {err:.3g})")


def jsd(p, q, axis=-1):
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_normalized(p, "first")
    _check_normalized(q, "second")
    m = 0.5 * (p + q)

    def kl(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(a > 0, a * (np.log2(a) - np.log2(np.where(m > 0, m, 1.0))), 0.0)
        return t.sum(axis)
    return np.clip(0.5 * kl(p) + 0.5 * kl(q), 0.0, 1.0)


def jsd_vs_expert_average(merged, base, fine, dataset):
    """Mean per-position JSD (x100) between merged and (P_base + P_fine) / 2."""
    vals = []
    streams = zip(iter_outputs(merged, dataset), iter_outputs(base, dataset), iter_outputs(fine, dataset))
    for (lm, _, _, _), (lb, _, _, _), (lf, _, _, _) in streams:
        if not lm.shape[-1] == lb.shape[-1] == lf.shape[-1]:
            raise ConfigError("models disagree on vocabulary size")
        pm = np.exp(_log_softmax(lm.astype(np.float64)))
        avg = 0.5 * (np.exp(_log_softmax(lb.astype(np.float64))) + np.exp(_log_softmax(lf.astype(np.float64))))
        vals.append(jsd(pm, avg).ravel())
    return 100.0 * float(np.concatenate(vals).mean())


# -- activation statistics --------------------------------------------------

def sparsity(activations, tol=ZERO_TOL):
    a = np.asarray(activations)
    if a.size == 0:
        return 0.0
    return 100.0 * float((np.abs(a) <= tol).mean())


def mean_activation(activations):
    a = np.asarray(activations)
    return float(np.abs(a).mean()) if a.size else 0.0


def polysemantic_fraction(mean_a, mean_b, threshold=0.05, n_a=None, n_b=None, eps=POLY_EPS):
    """Percentage of neurons whose normalised mean-activation gap is below ``threshold``.

    ``mean_a`` / ``mean_b`` are per-neuron mean activation magnitudes on each
    domain; ``n_a`` / ``n_b`` the sample counts behind them, when known.
    """
    if n_a == 0 or n_b == 0:
        raise InputError("each domain needs at least one probe sample")
    ma, mb = np.asarray(mean_a, dtype=np.float64), np.asarray(mean_b, dtype=np.float64)
    if ma.shape != mb.shape:
        raise InputError("per-domain statistics cover different neuron sets")
    if ma.size == 0:
        return 0.0
    gap = np.abs(ma - mb) / (np.abs(ma) + np.abs(mb) + eps)
    return 100.0 * float((gap < threshold).mean())


def domain_means(acts_a, acts_b):
    """Per-neuron mean |activation| for two (samples, neurons) matrices."""
    a, b = np.asarray(acts_a), np.asarray(acts_b)
    if len(a) == 0 or len(b) == 0:
        raise InputError("each domain needs at least one probe sample")
    return np.abs(a).mean(0), np.abs(b).mean(0)


def neuron_diversity(activations, k=10, seed=0, batch_size=64, max_iter=100):
    """Normalised entropy of the k-means cluster sizes of neuron profiles.

    ``activations`` is (samples, neurons); each neuron's column is its profile.
    """
    from sklearn.cluster import MiniBatchKMeans

    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2:
        raise InputError("activations must be (samples, neurons)")
    # canonical row order so the result cannot depend on how neurons are numbered
    profiles = a.T[np.lexsort(a[::-1])]
    n = len(profiles)
    if n < k:
        raise ConfigError(f"{n} neurons cannot fill {k} clusters")
    if k < 2:
        return 0.0
    uniq = np.unique(profiles, axis=0)
    if len(uniq) == 1:
        return 0.0
    km = MiniBatchKMeans(n_clusters=min(k, len(uniq)), batch_size=batch_size, max_iter=max_iter,
                         random_state=seed, n_init=3)
    with np.errstate(all="ignore"):
        labels = km.fit_predict(profiles)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum() / math.log(k))


# -- PCA --------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    iterations: list


def pca_project(x, components=2, tol=1e-8, max_iter=1000, seed=0):
    """Top principal components by power iteration with deflation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise InputError("PCA needs at least 2 samples and 2 dimensions")
    if not 1 <= components <= x.shape[1]:
        raise InputError(f"cannot take {components} components of {x.shape[1]} dimensions")
    xc = x - x.mean(0)
    cov = xc.T @ xc / (len(xc) - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    vecs, vals, iters = [], [], []
    c = cov.copy()
    scale = max(total, 1e-300)
    for _ in range(components):
        v = rng.normal(size=c.shape[0])
        for prev in vecs:
            v -= (v @ prev) * prev
        v /= np.linalg.norm(v)
        for it in range(1, max_iter + 1):
            w = c @ v
            nrm = np.linalg.norm(w)
            if nrm <= 1e-14 * scale:
                # remaining spectrum is numerically zero; any orthogonal direction will do
                it_done = it
                break
            w /= nrm
            delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
            v = w
            if delta < tol:
                it_done = it
                break
        else:
            raise NumericError(f"power iteration did not converge after {max_iter} iterations")
        for prev in vecs:
            v -= (v @ prev) * prev
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        lam = max(float(v @ cov @ v), 0.0)
        c = c - lam * np.outer(v, v)
        vecs.append(v)
        vals.append(lam)
        iters.append(it_done)
    comps = np.stack(vecs)
    explained = np.array(vals) / total if total > 0 else np.zeros(len(vals))
    return PCAResult(xc @ comps.T, comps, explained, iters)


def cosine(a, b, axis=-1):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a, axis=axis) * np.linalg.norm(b, axis=axis)
    return (a * b).sum(axis) / np.maximum(den, 1e-12)


# -- probes on a merged model -----------------------------------------------

def collect_states(model, dataset, layers, source="onward"):
    """Residual-stream states per layer as (tokens, h) matrices.

    ``source="onward"`` takes what the next block consumes (the autoencoder
    output at AE layers of a superposed model); ``"block"`` takes the raw
    block output h_l. The two agree everywhere else.
    """
    if source not in ("block", "onward"):
        raise ConfigError(f"unknown state source {source!r}")
    out = {l: [] for l in layers}
    for _, _, trace, _ in iter_outputs(model, dataset):
        for l in layers:
            s = trace.h(l) if source == "block" else trace.h_hat(l)
            out[l].append(s.reshape(-1, s.shape[-1]))
    return {l: np.concatenate(v) for l, v in out.items()}


def reconstruction_alignment(merged, base, fine, dataset, layers):
    """Per layer and domain, the fraction of sequences whose reconstruction is
    cosine-closer to the matching expert's hidden states than the other's."""
    batch = _as_batch(dataset)
    res = {l: {0: [], 1: []} for l in layers}
    streams = zip(iter_outputs(merged, batch), iter_outputs(base, batch), iter_outputs(fine, batch))
    for (_, _, tm, lab), (_, _, tb, _), (_, _, tf, _) in streams:
        for l in layers:
            hh = tm.h_hat(l).reshape(len(lab), -1)
            cb = cosine(hh, tb.h(l).reshape(len(lab), -1))
            cf = cosine(hh, tf.h(l).reshape(len(lab), -1))
            ok = np.where(lab == 1, cf > cb, cb > cf)
            for d in (0, 1):
                res[l][d].extend(ok[lab == d].tolist())
    return {l: {d: (float(np.mean(v)) if v else float("nan")) for d, v in r.items()} for l, r in res.items()}


def layer_probe(model, data_a, data_b, layers, k=10, seed=0, probe_tokens=2048, source="onward",
                threshold=0.05):
    """Sparsity, polysemantic fraction, diversity and mean activation per layer."""
    sa = collect_states(model, data_a, layers, source)
    sb = collect_states(model, data_b, layers, source)
    out = {}
    for l in layers:
        a, b = sa[l][:probe_tokens], sb[l][:probe_tokens]
        both = np.concatenate([a, b])
        ma, mb = domain_means(a, b)
        out[l] = {
            "sparsity": sparsity(both),
            "polysemantic": polysemantic_fraction(ma, mb, threshold, n_a=len(a), n_b=len(b)),
            "diversity": neuron_diversity(both, k=k, seed=seed),
            "mean_activation": mean_activation(both),
        }
    return out


# -- report -----------------------------------------------------------------

@dataclass
class EvalReport:
    perplexity: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    jsd_per_epoch: list = field(default_factory=list)
    layers: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    projections: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def validate(self):
        for m, d in self.perplexity.items():
            for dom, v in d.items():
                if not v > 0:
                    raise NumericError(f"non-positive perplexity for {m}/{dom}")
        for m, d in self.accuracy.items():
            for dom, v in d.items():
                if not 0.0 <= v <= 1.0:
                    raise NumericError(f"accuracy outside [0, 1] for {m}/{dom}")
        for v in self.jsd_per_epoch:
            if not 0.0 <= v["jsd"] <= 100.0:
                raise NumericError("JSD outside [0, 100]")
        return self

    def to_json(self):
        d = asdict(self)
        d.pop("projections")
        return json.dumps(_plain(d), indent=2, sort_keys=True)

    def write(self, out_dir):
        """Write report.json plus the per-figure CSV files into ``out_dir``."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        _write_csv(out / "projections.csv", ["model", "domain", "layer", "x", "y"],
                   [[p["model"], p["domain"], p["layer"], _fmt(p["x"]), _fmt(p["y"])] for p in self.projections])
        rows_div, rows_act = [], []
        for m, per_layer in sorted(self.layers.items()):
            for l, s in sorted(per_layer.items(), key=lambda kv: int(kv[0])):
                rows_div.append([m, l, _fmt(s["diversity"]), _fmt(s["polysemantic"]), _fmt(s["sparsity"])])
                rows_act.append([m, l, _fmt(s["mean_activation"])])
        _write_csv(out / "diversity.csv", ["model", "layer", "entropy", "polysemantic_pct", "sparsity_pct"], rows_div)
        _write_csv(out / "activation.csv", ["model", "layer", "mean_abs_activation"], rows_act)
        _write_csv(out / "jsd.csv", ["epoch", "jsd"], [[r["epoch"], _fmt(r["jsd"])] for r in self.jsd_per_epoch])
        return out / "report.json"


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
