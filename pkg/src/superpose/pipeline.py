"""End-to-end experiment: experts, baselines, superposition, evaluation.

Everything lands in one output directory::

    checkpoints/{base,fine,linear,task_arith,superposed}.sptx
    logs/expert_base.csv  logs/expert_fine.csv  logs/superpose.csv  logs/epochs.json
    report.json  projections.csv  diversity.csv  activation.csv  jsd.csv  states.sptx

The report is computed from the saved checkpoints only, so ``eval`` on an
existing directory reproduces the one written by ``run``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from pathlib import Path

import numpy as np

from . import analysis as an
from .autoencoder import AutoencoderStack
from .bspline import AlphaSchedule
from .checkpoint import load_checkpoint, load_model, model_artifacts, params_from_artifacts, save_checkpoint, save_model
from .data import BASE_DOMAIN, FINE_DOMAIN, Corpus, LabeledBatch, mixed_stream
from .model import train_expert
from .training import (LOG_COLUMNS, SuperposedModel, baseline_linear_merge, baseline_task_arithmetic,
                       train_superposed)

log = logging.getLogger(__name__)

# exit codes map one-to-one onto stage names; 0 means the pipeline completed
STAGES = {
    "config": 10,
    "train-expert": 11,
    "fine-tune": 12,
    "merge-baseline": 13,
    "superpose": 14,
    "eval": 15,
    "analyze": 16,
}
RUN_ORDER = ("train-expert", "fine-tune", "merge-baseline", "superpose", "eval", "analyze")
MODELS = ("base", "fine", "linear", "task_arith", "superposed")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = STAGES[stage]


class Workspace:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.ckpt = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self._corpora = None

    def prepare(self):
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.logs.mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, name):
        return self.ckpt / f"{name}.sptx"

    def corpora(self):
        if self._corpora is None:
            c = self.cfg
            ctx = c.model.context
            self._corpora = (
                Corpus.from_file("base", c.corpus_path("base"), ctx, c.corpus.val_fraction),
                Corpus.from_file("fine", c.corpus_path("fine"), ctx, c.corpus.val_fraction),
            )
        return self._corpora

    def val_sets(self):
        a, b = self.corpora()
        va = LabeledBatch(a.val_windows(), np.full(len(a.val_windows()), BASE_DOMAIN))
        vb = LabeledBatch(b.val_windows(), np.full(len(b.val_windows()), FINE_DOMAIN))
        both = mixed_stream(a.val_windows(), b.val_windows())
        return va, vb, both


def _write_losses(path, losses):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(losses))


def _write_train_log(path, tlog):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in tlog.rows:
            w.writerow([row[c] if c in ("step", "epoch") else repr(float(row[c])) for c in LOG_COLUMNS])


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- stages -----------------------------------------------------------------

def stage_train_expert(ws):
    corpus_a, _ = ws.corpora()
    params, losses = train_expert(corpus_a, ws.cfg.model_config(), ws.cfg.expert_train("expert"))
    save_model(params, ws.checkpoint("base"))
    _write_losses(ws.logs / "expert_base.csv", losses)


def stage_fine_tune(ws):
    _, corpus_b = ws.corpora()
    base = load_model(ws.checkpoint("base"))
    params, losses = train_expert(corpus_b, base.config, ws.cfg.expert_train("finetune"), init=base)
    save_model(params, ws.checkpoint("fine"))
    _write_losses(ws.logs / "expert_fine.csv", losses)


def stage_merge_baseline(ws):
    base, fine = load_model(ws.checkpoint("base")), load_model(ws.checkpoint("fine"))
    save_model(baseline_linear_merge(base, fine, ws.cfg.baselines.alpha0), ws.checkpoint("linear"))
    save_model(baseline_task_arithmetic(base, fine, ws.cfg.baselines.task_scale), ws.checkpoint("task_arith"))


def superposed_artifacts(model):
    out = model_artifacts(model.params)
    out.update(model.schedule.to_named())
    out.update(model.autoencoders.to_named())
    return out


def load_superposed(path):
    named = load_checkpoint(path)
    params = params_from_artifacts(named)
    return SuperposedModel(params, AutoencoderStack.from_named(named), AlphaSchedule.from_named(named))


def stage_superpose(ws):
    cfg = ws.cfg
    a, b = ws.corpora()
    base, fine = load_model(ws.checkpoint("base")), load_model(ws.checkpoint("fine"))
    before = (file_sha256(ws.checkpoint("base")), file_sha256(ws.checkpoint("fine")))
    data = mixed_stream(a.train_windows(), b.train_windows(), (cfg.corpus.repeat_base, cfg.corpus.repeat_fine))
    _, _, val = ws.val_sets()
    rc = cfg.train_run()

    def hook(epoch, schedule, aes):
        m = SuperposedModel.build(base, fine, schedule, aes, rc.global_source)
        return {"jsd": an.jsd_vs_expert_average(m, base, fine, val)}

    try:
        result = train_superposed(base, fine, data, rc, epoch_hook=hook)
    except Exception as e:
        partial = getattr(e, "partial_log", None)
        if partial is not None:
            _write_train_log(ws.logs / "superpose.csv", partial)
        raise
    _write_train_log(ws.logs / "superpose.csv", result.log)
    epochs = [{"epoch": e["epoch"], "mean_loss": e["mean_loss"], "jsd": e["jsd"], "alpha": e["alpha"]}
              for e in result.log.epochs]
    (ws.logs / "epochs.json").write_text(json.dumps(epochs, indent=1) + "\n")
    model = SuperposedModel.build(base, fine, result.schedule, result.autoencoders, rc.global_source)
    save_checkpoint(superposed_artifacts(model), ws.checkpoint("superposed"))
    after = (file_sha256(ws.checkpoint("base")), file_sha256(ws.checkpoint("fine")))
    if before != after:
        raise RuntimeError("expert checkpoints changed during superposition training")


def load_all(ws):
    models = {n: load_model(ws.checkpoint(n)) for n in ("base", "fine", "linear", "task_arith")}
    models["superposed"] = load_superposed(ws.checkpoint("superposed"))
    return models


def build_report(ws):
    """Evaluate every saved model; returns an :class:`EvalReport`."""
    cfg = ws.cfg
    models = load_all(ws)
    va, vb, both = ws.val_sets()
    rep = an.EvalReport()
    for name in MODELS:
        m = models[name]
        rep.perplexity[name] = {"base_domain": an.perplexity(m, va), "fine_domain": an.perplexity(m, vb),
                                "combined": an.perplexity(m, both)}
        rep.accuracy[name] = {"base_domain": an.next_token_accuracy(m, va),
                              "fine_domain": an.next_token_accuracy(m, vb),
                              "combined": an.next_token_accuracy(m, both)}
    epochs = json.loads((ws.logs / "epochs.json").read_text())
    rep.jsd_per_epoch = [{"epoch": e["epoch"], "jsd": e["jsd"]} for e in epochs]
    sup = models["superposed"]
    ae_layers = list(sup.autoencoders.layers)
    rep.alignment = {str(l): {"base_domain": v[BASE_DOMAIN], "fine_domain": v[FINE_DOMAIN]}
                     for l, v in an.reconstruction_alignment(sup, models["base"], models["fine"], both,
                                                             ae_layers).items()}
    layers = list(range(0, sup.config.n_layers + 1))
    ac = cfg.analysis
    for name in ("base", "fine", "superposed"):
        probe = an.layer_probe(models[name], va, vb, layers, k=ac.k, seed=int(cfg.seed) % 2 ** 32,
                               probe_tokens=ac.probe_tokens, threshold=ac.poly_threshold)
        rep.layers[name] = {str(l): s for l, s in probe.items()}
    rep.projections = projections(models, va, vb, ac.pca_layers or layers, ac.pca_components)
    rep.meta = {
        "config_hash": cfg.hash(),
        "seed": int(cfg.seed),
        "mode": cfg.mode,
        "ae_layers": ae_layers,
        "alpha": np.asarray(sup.schedule.alpha_all().data).tolist(),
        "model_params": models["base"].n_params(),
        "ae_params_per_layer": sup.autoencoders.param_count(),
        "artifacts": {n: {"path": f"checkpoints/{n}.sptx", "sha256": file_sha256(ws.checkpoint(n))}
                      for n in MODELS},
    }
    return rep.validate()


def projections(models, va, vb, layers, n_comp=2):
    """Per-sequence mean hidden states projected onto the top principal axes,
    fitted per (model, layer) over both domains."""
    rows = []
    for name in ("base", "fine", "superposed"):
        m = models[name]
        pts = {}
        for dom, data in (("base_domain", va), ("fine_domain", vb)):
            per = {l: [] for l in layers}
            for _, _, trace, _ in an.iter_outputs(m, data):
                for l in layers:
                    per[l].append(trace.h_hat(l).mean(axis=1))
            pts[dom] = {l: np.concatenate(v) for l, v in per.items()}
        for l in layers:
            x = np.concatenate([pts["base_domain"][l], pts["fine_domain"][l]])
            res = an.pca_project(x, components=max(2, n_comp))
            n_a = len(pts["base_domain"][l])
            for i, c in enumerate(res.coords):
                rows.append({"model": name, "domain": "base_domain" if i < n_a else "fine_domain",
                             "layer": l, "x": float(c[0]), "y": float(c[1])})
    return rows


def stage_eval(ws):
    rep = build_report(ws)
    (ws.root / "report.json").write_text(rep.to_json() + "\n")
    return rep


def stage_analyze(ws, rep=None):
    if rep is None:
        rep = build_report(ws)
    rep.write(ws.root)
    export_states(ws)
    return rep


def export_states(ws):
    """Raw per-sequence mean hidden states, for projections made outside the package."""
    models = load_all(ws)
    va, vb, _ = ws.val_sets()
    out = {}
    for name in ("base", "fine", "superposed"):
        layers = range(0, models[name].config.n_layers + 1)
        for dom, data in (("base_domain", va), ("fine_domain", vb)):
            per = {l: [] for l in layers}
            for _, _, trace, _ in an.iter_outputs(models[name], data):
                for l in layers:
                    per[l].append(trace.h_hat(l).mean(axis=1))
            for l in layers:
                out[f"states.{name}.{dom}.layer{l}"] = np.concatenate(per[l])
    save_checkpoint(out, ws.root / "states.sptx")


STAGE_FUNCS = {
    "train-expert": stage_train_expert,
    "fine-tune": stage_fine_tune,
    "merge-baseline": stage_merge_baseline,
    "superpose": stage_superpose,
    "eval": stage_eval,
    "analyze": stage_analyze,
}


def run_stage(ws, stage, *args):
    t0 = time.perf_counter()
    log.info("stage %s", stage)
    try:
        out = STAGE_FUNCS[stage](ws, *args)
    except Exception as e:
        fail = {"stage": stage, "exit_code": STAGES[stage], "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}
        (ws.logs / "failure.json").write_text(json.dumps(fail, indent=1) + "\n")
        raise StageError(stage, e) from e
    _record_time(ws, stage, time.perf_counter() - t0)
    return out


def _record_time(ws, stage, seconds):
    path = ws.logs / "timing.json"
    times = json.loads(path.read_text()) if path.exists() else {}
    times[stage] = round(seconds, 3)
    path.write_text(json.dumps(times, indent=1) + "\n")


def run_experiment(cfg, start="train-expert"):
    """Run the pipeline from ``start`` to the end; returns the EvalReport."""
    if start not in RUN_ORDER:
        raise ValueError(f"unknown stage {start!r}; choose from {', '.join(RUN_ORDER)}")
    ws = Workspace(cfg).prepare()
    stale = ws.logs / "failure.json"
    if stale.exists():
        stale.unlink()
    rep = None
    for stage in RUN_ORDER[RUN_ORDER.index(start):]:
        out = run_stage(ws, stage, rep) if stage == "analyze" else run_stage(ws, stage)
        if stage in ("eval", "analyze"):
            rep = out
    return rep
