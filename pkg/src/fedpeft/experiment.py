"""Config-driven pipelines: pretrain, federate, evaluate, and the ViT-B/16 reference table.

Configuration is a TOML file.  Every section is optional; omitted keys take the
defaults below.  Schema (version 1)::

    schema_version = 1
    seed = 0
    output_dir = "runs/example"
    reset_head = true              # fresh classification head before federating

    [model]                        # ModelSpec fields
    [mode]                         # TuningMode fields (kind, adapter_bottleneck, ...)
    [federation]                   # num_clients, clients_per_round, rounds,
                                   # local_epochs, alpha, horizontal_flip
    [sgd.<mode>]                   # learning_rate, weight_decay, batch_size
    [dp]                           # enabled, epsilon, delta, clip_norm, per_sample
    [data]                         # source = "synthetic" | "idx" | "csv",
                                   # total_samples (0 = all), eval_samples_per_class
    [data.synthetic]               # SyntheticTaskSpec fields (target task)
    [data.idx]                     # train_images, train_labels, eval_images, eval_labels
    [data.csv]                     # train, eval, image_shape
    [pretrain]                     # epochs, learning_rate, weight_decay,
                                   # batch_size, samples_per_class, shift
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .comm import CommLedger, format_millions, rounded_param_count, rounded_round_cost
from .data import (Dataset, SyntheticTaskSpec, dirichlet_partition, heterogeneity, label_entropy,
                   load_csv, load_idx, make_synthetic)
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .federation import FederationConfig, evaluate, run_training
from .models import ModelSpec, build_model, count_params, init_head
from .peft import TuningMode, apply_mode
from .privacy import DpConfig
from .tensor import SgdConfig

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# learning rates per mode; weight decay 1e-4 and batch 64 throughout
DEFAULT_LR = {"full": 1e-3, "head": 5e-3, "bias": 1e-2, "adapter": 5e-3, "prompt": 1e-2}
DEFAULT_DP_LR = {"full": 1e-4, "head": 5e-4, "bias": 1e-3, "adapter": 5e-4, "prompt": 3e-4}


def default_sgd(kind: str, dp: bool = False) -> SgdConfig:
    table = DEFAULT_DP_LR if dp else DEFAULT_LR
    return SgdConfig(table[kind], 1e-4, 64)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    eval_samples_per_class: int = 50
    total_samples: int = 0
    idx: dict = field(default_factory=dict)
    csv: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "idx", "csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "eval_images", "eval_labels"):
                if key not in self.idx:
                    raise ConfigError(f"[data.idx] requires {key!r}")
        if self.source == "csv":
            for key in ("train", "eval"):
                if key not in self.csv:
                    raise ConfigError(f"[data.csv] requires {key!r}")
        if self.total_samples < 0:
            raise ConfigError("total_samples must be non-negative")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 32
    samples_per_class: int = 200
    shift: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    mode: TuningMode = field(default_factory=TuningMode)
    num_clients: int = 64
    clients_per_round: int = 8
    rounds: int = 50
    local_epochs: int = 10
    alpha: float = 0.1
    horizontal_flip: float = 0.0
    sgd: dict = field(default_factory=dict)       # mode -> SgdConfig overrides
    dp: DpConfig = field(default_factory=lambda: DpConfig(enabled=False))
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reset_head: bool = True
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode.kind in ("adapter", "prompt") and self.model.family != "vit":
            raise ConfigError(f"mode {self.mode.kind!r} needs model.family = 'vit'")
        if self.data.source == "synthetic" and self.data.synthetic.class_count != self.model.num_classes:
            raise ConfigError("data.synthetic.class_count must equal model.num_classes")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        self.federation()  # validates N/M/T/E

    def sgd_for(self, kind: str | None = None) -> SgdConfig:
        kind = kind or self.mode.kind
        return self.sgd.get(kind) or default_sgd(kind, dp=self.dp.enabled)

    def federation(self) -> FederationConfig:
        return FederationConfig(self.num_clients, self.clients_per_round, self.rounds,
                                self.local_epochs, self.seed, self.sgd_for(),
                                self.dp if self.dp.enabled else None, self.horizontal_flip)

    def with_mode(self, kind: str) -> ExperimentConfig:
        return replace(self, mode=replace(self.mode, kind=kind))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "reset_head": self.reset_head,
            "model": self.model.to_dict(),
            "mode": self.mode.to_dict(),
            "federation": {"num_clients": self.num_clients,
                           "clients_per_round": self.clients_per_round,
                           "rounds": self.rounds, "local_epochs": self.local_epochs,
                           "alpha": self.alpha, "horizontal_flip": self.horizontal_flip},
            "sgd": {k: vars_of(v) for k, v in sorted(self.sgd.items())},
            "dp": self.dp.to_dict(),
            "data": {"source": self.data.source, "synthetic": self.data.synthetic.to_dict(),
                     "eval_samples_per_class": self.data.eval_samples_per_class,
                     "total_samples": self.data.total_samples,
                     "idx": dict(self.data.idx), "csv": dict(self.data.csv)},
            "pretrain": vars_of(self.pretrain),
        }

    def config_hash(self) -> str:
        """sha256 over the canonical config, excluding where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def vars_of(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def _build(cls, raw: dict, section: str):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    kwargs: dict = {}
    for key in ("seed", "output_dir", "reset_head"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if "model" in raw:
        kwargs["model"] = _build(ModelSpec, raw.pop("model"), "model")
    if "mode" in raw:
        kwargs["mode"] = _build(TuningMode, raw.pop("mode"), "mode")
    if "federation" in raw:
        fed = dict(raw.pop("federation"))
        for key in ("num_clients", "clients_per_round", "rounds", "local_epochs", "alpha",
                    "horizontal_flip"):
            if key in fed:
                kwargs[key] = fed.pop(key)
        if fed:
            raise ConfigError(f"[federation] unknown keys: {sorted(fed)}")
    if "sgd" in raw:
        sgd = {}
        for kind, table in raw.pop("sgd").items():
            if kind not in DEFAULT_LR:
                raise ConfigError(f"[sgd.{kind}] is not a tuning mode")
            sgd[kind] = _build(SgdConfig, table, f"sgd.{kind}")
        kwargs["sgd"] = sgd
    if "dp" in raw:
        kwargs["dp"] = _build(DpConfig, raw.pop("dp"), "dp")
    if "data" in raw:
        data = dict(raw.pop("data"))
        if "synthetic" in data:
            data["synthetic"] = _build(SyntheticTaskSpec, data["synthetic"], "data.synthetic")
        kwargs["data"] = _build(DataConfig, data, "data")
    if "pretrain" in raw:
        kwargs["pretrain"] = _build(PretrainConfig, raw.pop("pretrain"), "pretrain")
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# data


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, eval) for the federated task, with the optional total-sample cap."""
    d = cfg.data
    if d.source == "synthetic":
        train = make_synthetic(d.synthetic, seed=cfg.seed * 1000 + 2)
        evs = replace(d.synthetic, samples_per_class=d.eval_samples_per_class)
        ev = make_synthetic(evs, seed=cfg.seed * 1000 + 3)
    elif d.source == "idx":
        train = load_idx(d.idx["train_images"], d.idx["train_labels"], cfg.model.num_classes)
        ev = load_idx(d.idx["eval_images"], d.idx["eval_labels"], cfg.model.num_classes)
    else:
        shape = tuple(d.csv["image_shape"]) if "image_shape" in d.csv else None
        train = load_csv(d.csv["train"], cfg.model.num_classes, shape)
        ev = load_csv(d.csv["eval"], cfg.model.num_classes, shape)
    if d.total_samples:
        train = train.cap(d.total_samples, seed=cfg.seed)
    return train, ev


def source_dataset(cfg: ExperimentConfig) -> Dataset:
    """Pretraining task: the synthetic generator at the pretraining shift."""
    if cfg.data.source != "synthetic":
        raise ConfigError("pretraining needs a synthetic source task description")
    spec = replace(cfg.data.synthetic, shift=cfg.pretrain.shift,
                   samples_per_class=cfg.pretrain.samples_per_class)
    return make_synthetic(spec, seed=cfg.seed * 1000 + 1)


# ---------------------------------------------------------------------------
# pipelines


def pretrain(cfg: ExperimentConfig, out_path=None):
    """Centralised full training on the source task; returns (model, history).

    ``history`` holds per-epoch (mean loss, train accuracy).
    """
    data = source_dataset(cfg)
    model = build_model(cfg.model, seed=cfg.seed)
    p = cfg.pretrain
    sgd = SgdConfig(p.learning_rate, p.weight_decay, p.batch_size)
    rng = np.random.default_rng([cfg.seed, 7])
    history = []
    for epoch in range(p.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), sgd.batch_size):
            idx = np.sort(order[start:start + sgd.batch_size])
            loss = T.cross_entropy_loss(model(data.features[idx]), data.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"pretraining diverged at epoch {epoch}: loss {value}")
            T.backward(loss)
            T.sgd_step(model.trainable_params(), sgd)
            losses.append(value)
        acc, _ = evaluate(model, data)
        history.append((float(np.mean(losses)), acc))
        log.info("pretrain epoch %d: loss=%.4f acc=%.4f", epoch, history[-1][0], acc)
    if out_path is not None:
        save_checkpoint(model, out_path, {"pretrained": True, "config_hash": cfg.config_hash(),
                                          "history": history})
    return model, history


def prepare_model(cfg: ExperimentConfig, checkpoint):
    """Load a checkpoint, optionally reset the head, and apply the tuning mode."""
    model, _ = load_checkpoint(checkpoint) if not hasattr(checkpoint, "registry") else (checkpoint, {})
    if model.spec != cfg.model:
        raise ConfigError(f"checkpoint spec {model.spec} does not match config {cfg.model}")
    if model.mode is not None:
        raise ContractError("federation must start from an unmodified (base) checkpoint")
    model = model.clone()
    if cfg.reset_head:
        rng = np.random.default_rng([cfg.seed, 11])
        w = model.params["head.weight"]
        w.data = init_head(rng, w.shape).astype(w.dtype)
        model.params["head.bias"].data = np.zeros_like(model.params["head.bias"].data)
    return apply_mode(model, cfg.mode, seed=cfg.seed)


class _Lock:
    """Exclusive lock on an output directory for the lifetime of a run."""

    def __init__(self, directory: Path):
        from filelock import FileLock, Timeout
        self._lock = FileLock(str(directory / ".lock"))
        self._timeout = Timeout

    def __enter__(self):
        try:
            self._lock.acquire(timeout=0)
        except self._timeout:
            raise ConfigError("another experiment is running in this output directory") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()


def federate(cfg: ExperimentConfig, checkpoint, out_dir=None, *, threads: int = 1):
    """Run federated fine-tuning and persist metrics, ledger, and final checkpoint.

    Files written to ``out_dir``: ``metrics.jsonl`` (one header line, then one
    line per round, flushed as each round completes), ``ledger.csv``,
    ``final.ckpt`` and ``run_meta.json`` (timestamps and thread count live only
    here).  Returns the round history.
    """
    import datetime

    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _Lock(out):
        ckpt_hash = file_hash(checkpoint) if not hasattr(checkpoint, "registry") else None
        model = prepare_model(cfg, checkpoint)
        train, ev = load_datasets(cfg)
        partition = dirichlet_partition(train.labels, cfg.num_clients, cfg.alpha, seed=cfg.seed)
        fed = cfg.federation()
        mode = cfg.mode.kind
        ledger = CommLedger()
        meta = {"started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "code_version": __version__, "threads": threads,
                "config_hash": cfg.config_hash(), "checkpoint_sha256": ckpt_hash,
                "config": cfg.to_dict()}
        (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        init_acc, init_loss = evaluate(model, ev)
        with open(out / "metrics.jsonl", "w") as fh:
            header = {"type": "run", "config_hash": cfg.config_hash(), "code_version": __version__,
                      "mode": mode, "param_count": model.registry.count(transmitted=True),
                      "total_params": model.registry.count(), "initial_accuracy": init_acc,
                      "initial_loss": init_loss}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            fh.flush()

            def persist(rec):
                fh.write(json.dumps({"type": "round", **rec.to_dict()}, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
                ledger.record(rec.round, mode, rec.param_count, len(rec.sampled),
                              rec.server_accuracy)
                ledger.to_csv(out / "ledger.csv")

            history = run_training(model, train, partition, fed, ev, threads=threads,
                                   on_round=persist)
        save_checkpoint(model, out / "final.ckpt", {"config_hash": cfg.config_hash(),
                                                    "rounds": len(history)})
    return history


def evaluate_checkpoint(checkpoint, dataset: Dataset, spec: ModelSpec | None = None) -> tuple[float, float]:
    model, _ = load_checkpoint(checkpoint)
    if spec is not None and model.spec != spec:
        raise ConfigError(f"checkpoint spec {model.spec} does not match {spec}")
    if dataset.class_count != model.spec.num_classes:
        raise DataError(f"dataset has {dataset.class_count} classes, model {model.spec.num_classes}")
    return evaluate(model, dataset)


def read_metrics(path) -> tuple[dict, list[dict]]:
    """(header, round records) from a metrics.jsonl file."""
    header, rounds = {}, []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.pop("type") == "run":
                header = rec
            else:
                rounds.append(rec)
    return header, rounds


# ---------------------------------------------------------------------------
# analytical reproduction of the communication table

TABLE1_EXPECTED = {
    "full": ("85.88M", 8, "2.56GB"),
    "head": ("0.08M", 8, "2.44MB"),
    "bias": ("0.18M", 8, "5.49MB"),
    "adapter": ("0.23M", 8, "7.02MB"),
    "prompt": ("0.17M", 8, "5.19MB"),
}


@dataclass(frozen=True)
class Table1Row:
    mode: str
    exact: int
    millions: str
    clients: int
    cost: str
    expected: tuple[str, int, str]

    @property
    def ok(self) -> bool:
        return (self.millions, self.clients, self.cost) == self.expected

    def render(self) -> str:
        status = "ok" if self.ok else f"MISMATCH (expected {self.expected[0]} x {self.expected[1]}, {self.expected[2]})"
        return (f"{self.mode:<8} {self.exact:>11,d}  {self.millions} x {self.clients}, "
                f"{self.cost:<8} {status}")


def report_table1(spec: ModelSpec | None = None, clients: int = 8) -> list[Table1Row]:
    spec = spec or ModelSpec.vit_base(100)
    modes = {"full": TuningMode("full"), "head": TuningMode("head"), "bias": TuningMode("bias"),
             "adapter": TuningMode("adapter", adapter_bottleneck=8),
             "prompt": TuningMode("prompt", prompt_length=10)}
    rows = []
    for kind, mode in modes.items():
        tuned = count_params(spec, mode).tuned
        rows.append(Table1Row(kind, tuned, format_millions(rounded_param_count(tuned)), clients,
                              rounded_round_cost(tuned, clients), TABLE1_EXPECTED[kind]))
    return rows


def partition_stats(cfg: ExperimentConfig) -> dict:
    train, _ = load_datasets(cfg)
    part = dirichlet_partition(train.labels, cfg.num_clients, cfg.alpha, seed=cfg.seed)
    counts = part.class_counts(train.labels, train.class_count)
    return {"num_clients": cfg.num_clients, "alpha": cfg.alpha, "seed": cfg.seed,
            "samples": int(len(train)), "shard_sizes": part.shard_sizes().tolist(),
            "label_entropy": [round(float(e), 6) for e in label_entropy(counts)],
            "heterogeneity": heterogeneity(counts)}
