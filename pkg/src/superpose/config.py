"""Experiment configuration loaded from TOML.

Every section and key is optional; omitted values take the defaults below.
Unknown sections or keys are rejected. See ``configs/default.toml`` for a
complete, commented example.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import bundled_corpus_path
from .errors import ConfigError
from .losses import LossWeights
from .model import ExpertTrainConfig, ModelConfig
from .training import TrainRunConfig


@dataclass
class CorpusConfig:
    base: str = "bundled:en"
    fine: str = "bundled:fr"
    val_fraction: float = 0.1
    repeat_base: int = 1
    repeat_fine: int = 1


@dataclass
class StageTrain:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 50
    grad_clip: float = 1.0


@dataclass
class SuperposeConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    global_source: str = "average"
    n_ctrl: int = 8
    degree: int = 3
    log_every: int = 1


@dataclass
class AutoencoderSection:
    layout: str = ""  # empty: gated for 1d, dual2d for 2d
    bottleneck: int = 0  # 0: layout default
    layers: list = field(default_factory=list)  # empty: layout default
    decoders: int = 1


@dataclass
class BaselineConfig:
    alpha0: float = 0.5
    task_scale: float = 0.5


@dataclass
class AnalysisConfig:
    k: int = 10
    probe_tokens: int = 2048
    poly_threshold: float = 0.05
    pca_components: int = 2
    pca_layers: list = field(default_factory=list)  # empty: every layer


@dataclass
class ModelSection:
    n_layers: int = 6
    hidden: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    context: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "1d"
    out_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    expert: StageTrain = field(default_factory=StageTrain)
    finetune: StageTrain = field(default_factory=lambda: StageTrain(steps=800, lr=2e-3))
    superpose: SuperposeConfig = field(default_factory=SuperposeConfig)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    loss: LossWeights = field(default_factory=LossWeights)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        if self.mode not in ("1d", "2d"):
            raise ConfigError(f"mode must be '1d' or '2d', got {self.mode!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.superpose.global_source not in ("base", "fine", "average"):
            raise ConfigError(f"unknown global_source {self.superpose.global_source!r}")
        for name in ("expert", "finetune"):
            st = getattr(self, name)
            if st.steps < 0 or st.batch_size < 1:
                raise ConfigError(f"[{name}] steps must be >= 0 and batch_size >= 1")
        if self.corpus.repeat_base < 1 or self.corpus.repeat_fine < 1:
            raise ConfigError("corpus repetition factors must be >= 1")
        if not 0.0 <= self.baselines.alpha0 <= 1.0:
            raise ConfigError("baselines.alpha0 must lie in [0, 1]")

    # -- derived configs ----------------------------------------------------

    def model_config(self):
        m = self.model
        return ModelConfig(m.n_layers, m.hidden, m.n_heads, m.ff_mult, m.context, seed=int(self.seed))

    def expert_train(self, stage):
        st = getattr(self, stage)
        return ExpertTrainConfig(st.steps, st.batch_size, st.lr, st.warmup, st.grad_clip, int(self.seed))

    def train_run(self):
        s, ae = self.superpose, self.autoencoder
        return TrainRunConfig(
            mode=self.mode, epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
            beta1=s.beta1, beta2=s.beta2, eps=s.eps, grad_clip=s.grad_clip, weights=self.loss,
            layout=ae.layout or None, bottleneck=ae.bottleneck or None,
            ae_layers=tuple(ae.layers) if ae.layers else None, decoders=ae.decoders,
            n_ctrl=s.n_ctrl, degree=s.degree, global_source=s.global_source,
            seed=int(self.seed), log_every=s.log_every)

    def corpus_path(self, which):
        ref = getattr(self.corpus, which)
        if ref.startswith("bundled:"):
            return ref
        p = Path(ref)
        return str(p if p.is_absolute() else Path(self.base_dir) / p)

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self):
        """Digest of everything that influences results (the output dir does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed=None, mode=None, out_dir=None):
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if mode is not None:
            kw["mode"] = mode
        if out_dir is not None:
            kw["out_dir"] = str(out_dir)
        return replace(self, **kw) if kw else self


_SECTIONS = {
    "model": ModelSection, "corpus": CorpusConfig, "expert": StageTrain, "finetune": StageTrain,
    "superpose": SuperposeConfig, "autoencoder": AutoencoderSection, "loss": LossWeights,
    "baselines": BaselineConfig, "analysis": AnalysisConfig,
}


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    default = cls() if where != "finetune" else StageTrain(steps=800, lr=2e-3)
    kw = {}
    for k, v in table.items():
        want = type(getattr(default, k))
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if want is not type(v):
            raise ConfigError(f"[{where}] {k} should be {want.__name__}, got {type(v).__name__}")
        kw[k] = v
    try:
        return replace(default, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


def from_dict(raw, base_dir="."):
    raw = dict(raw)
    top = {}
    exp = raw.pop("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("[experiment] must be a table")
    unknown = sorted(set(exp) - {"seed", "mode", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(unknown)}")
    top.update(exp)
    for name, table in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        top[name] = _build(_SECTIONS[name], table, name)
    try:
        cfg = ExperimentConfig(base_dir=str(base_dir), **top)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    check_files(cfg)
    return cfg


def check_files(cfg):
    for which in ("base", "fine"):
        ref = cfg.corpus_path(which)
        path = bundled_corpus_path(ref.split(":", 1)[1]) if ref.startswith("bundled:") else Path(ref)
        if not Path(str(path)).is_file():
            raise ConfigError(f"corpus file for {which!r} not found: {ref}")


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw, base_dir=path.parent)


def default_config_path():
    from importlib import resources
    return Path(str(resources.files("superpose").joinpath("configs").joinpath("default.toml")))
