"""Run configuration and the end-to-end steps shared by the CLI and the test suite.

A run directory produced by :func:`write_run` holds the dataset JSONL (plus its
header), the split, the fitted encoder, the task catalog and one label file per
task. :func:`load_run` reads it back; :func:`run_cell` trains and evaluates one
(model, task) pair.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datagen import GeneratorConfig, Sample, generate_dataset, read_jsonl, split_indices, write_jsonl
from .encode import EncodedData, Encoder, encode_dataset, fit_encoder
from .errors import ConfigError
from .model import Model, ModelSpec
from .symbolic import ExprLabelSet, SymbolicExpr, default_decay_lambda, label_dataset, task_catalog
from .trainer import FitReport, TrainConfig, TrainResult, evaluate, train

TOOL_VERSION = "0.1.0"

# desk-scale protocol: 3000 samples split 2000 / 1000, sequences of 10 to 50 events
DESK_CONFIG = {
    "generator": {"preset": "synthetic-1", "n_samples": 3000, "min_len": 10, "max_len": 50, "seed": 0},
    "split": {"n_train": None, "train_fraction": 2 / 3, "seed": None},
    "encoder": {"tau": 50, "lowfreq_cutoff": 5},
    "tasks": {"seed": 0, "decay_lambda": None, "distinct_field": 0},
    "model": {},
    "train": {"learning_rate": 1e-3, "batch_size": 64, "max_epochs": 60, "patience": 10, "seed": 0},
    "eval": {"n_permutations": 199, "seed": 0},
}

SECTIONS = tuple(DESK_CONFIG)


# ---------------------------------------------------------------- config


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b=value`` -> (["a", "b"], parsed value); values are read as YAML scalars."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from exc
    return path, value


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides=(), base: dict | None = None) -> dict:
    """``base`` (DESK_CONFIG by default), then the YAML file, then ``key=value`` overrides, in that order."""
    cfg = merge(copy.deepcopy(DESK_CONFIG), base or {})
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, loaded)
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k!r} is not a section")
        node[keys[-1]] = value
    validate_config(cfg)
    return cfg


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key: {section}.{unknown[0]}")


def validate_config(cfg: dict) -> None:
    _check_keys("", cfg, SECTIONS)
    for name in SECTIONS:
        if not isinstance(cfg.get(name, {}), dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
    gen = dict(cfg["generator"])
    _check_keys("generator", gen, {f.name for f in dataclasses.fields(GeneratorConfig)} | {"preset"})
    _check_keys("split", cfg["split"], {"n_train", "train_fraction", "seed"})
    _check_keys("encoder", cfg["encoder"], {"tau", "lowfreq_cutoff", "field_kinds"})
    _check_keys("tasks", cfg["tasks"], {"seed", "decay_lambda", "distinct_field"})
    _check_keys("model", cfg["model"], {f.name for f in dataclasses.fields(ModelSpec)} - {"architecture"})
    _check_keys("train", cfg["train"], {f.name for f in dataclasses.fields(TrainConfig)})
    _check_keys("eval", cfg["eval"], {"n_permutations", "seed"})
    generator_config(cfg).validate()
    train_config(cfg)
    ModelSpec("SA", **cfg["model"])
    if int(cfg["encoder"].get("tau", 1)) < 1:
        raise ConfigError("encoder.tau must be >= 1")


def generator_config(cfg: dict) -> GeneratorConfig:
    gen = dict(cfg["generator"])
    preset = gen.pop("preset", None)
    try:
        return GeneratorConfig.preset(preset, **gen) if preset else GeneratorConfig.from_dict(gen)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def model_spec(cfg: dict, architecture: str) -> ModelSpec:
    return ModelSpec(architecture, **cfg["model"])


def split_for(cfg: dict, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random split when ``split.seed`` is set, otherwise the first ``n_train`` samples train."""
    sp = cfg["split"]
    if sp.get("n_train") is not None:
        n_train = int(sp["n_train"])
    else:
        n_train = int(round(n * float(sp.get("train_fraction", 2 / 3))))
    if not 0 < n_train < n:
        raise ConfigError(f"split leaves no train or test samples (n_train={n_train}, n={n})")
    if sp.get("seed") is None:
        return np.arange(n_train), np.arange(n_train, n)
    return split_indices(n, n_train / n, int(sp["seed"]))


# ---------------------------------------------------------------- run directory


def task_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_over_", name)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Run:
    """Everything a training cell needs, in memory."""

    config: dict
    dataset: list[Sample]
    train_idx: np.ndarray
    test_idx: np.ndarray
    encoder: Encoder
    tasks: dict[str, SymbolicExpr]
    labels: dict[str, ExprLabelSet] = field(default_factory=dict)
    _encoded: EncodedData | None = field(default=None, repr=False)

    @property
    def encoded(self) -> EncodedData:
        if self._encoded is None:
            self._encoded = encode_dataset(self.dataset, self.encoder, int(self.config["encoder"]["tau"]))
        return self._encoded

    def label(self, task: str) -> ExprLabelSet:
        if task not in self.labels:
            if task not in self.tasks:
                raise ConfigError(f"unknown task {task!r}; choose from {sorted(self.tasks)}")
            self.labels[task] = label_dataset(self.tasks[task], self.dataset, self.train_idx)
        return self.labels[task]


def build_run(cfg: dict) -> Run:
    """Generate the dataset, split it, fit the encoder on the train part and build the task catalog."""
    dataset = generate_dataset(generator_config(cfg))
    return _assemble(cfg, dataset)


def _assemble(cfg: dict, dataset: list[Sample]) -> Run:
    train_idx, test_idx = split_for(cfg, len(dataset))
    train_part = [dataset[i] for i in train_idx]
    enc_cfg = cfg["encoder"]
    encoder = Encoder(*fit_encoder(train_part, int(enc_cfg.get("lowfreq_cutoff", 5)), enc_cfg.get("field_kinds")))
    t = cfg["tasks"]
    lam = t.get("decay_lambda") or default_decay_lambda(train_part)
    tasks = task_catalog(int(t.get("seed", 0)), float(lam), int(t.get("distinct_field", 0)))
    return Run(cfg, dataset, train_idx, test_idx, encoder, tasks)


def write_run(run: Run, out: str | Path) -> dict[str, str]:
    """Persist a run; returns artifact name -> path."""
    out = Path(out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    paths = {"dataset": out / "dataset.jsonl", "split": out / "split.json", "encoder": out / "encoder.json",
             "tasks": out / "tasks.json", "config": out / "config.yaml"}
    write_jsonl(run.dataset, paths["dataset"], generator_config(run.config))
    paths["dataset_header"] = paths["dataset"].with_name("dataset.jsonl.header.json")
    paths["split"].write_text(json.dumps({"train": run.train_idx.tolist(), "test": run.test_idx.tolist()}),
                              encoding="utf-8")
    run.encoder.save(paths["encoder"])
    paths["tasks"].write_text(json.dumps({k: v.to_dict() for k, v in run.tasks.items()}, indent=1),
                              encoding="utf-8")
    paths["config"].write_text(yaml.safe_dump(run.config, sort_keys=True), encoding="utf-8")
    for name in run.tasks:
        try:
            labels = run.label(name)
        except ConfigError:
            continue  # degenerate task on this dataset; symtest reports it when asked for
        p = out / "labels" / f"{task_filename(name)}.jsonl"
        labels.write(p)
        paths[f"labels:{name}"] = p
    return {k: str(v) for k, v in paths.items()}


def load_run(data_dir: str | Path, cfg: dict | None = None) -> Run:
    """Read a run directory. ``cfg`` overrides the stored config's model/train/eval sections."""
    data_dir = Path(data_dir)
    stored = yaml.safe_load((data_dir / "config.yaml").read_text(encoding="utf-8"))
    if cfg is not None:
        stored = merge(stored, {k: cfg[k] for k in ("model", "train", "eval") if k in cfg})
        if "tau" in cfg.get("encoder", {}):
            stored["encoder"]["tau"] = cfg["encoder"]["tau"]
    dataset = read_jsonl(data_dir / "dataset.jsonl")
    split = json.loads((data_dir / "split.json").read_text(encoding="utf-8"))
    encoder = Encoder.load(data_dir / "encoder.json")
    raw_tasks = json.loads((data_dir / "tasks.json").read_text(encoding="utf-8"))
    tasks = {k: SymbolicExpr.from_dict(v) for k, v in raw_tasks.items()}
    run = Run(stored, dataset, np.asarray(split["train"], dtype=np.int64), np.asarray(split["test"], dtype=np.int64),
              encoder, tasks)
    for name in tasks:
        p = data_dir / "labels" / f"{task_filename(name)}.jsonl"
        if p.exists():
            run.labels[name] = ExprLabelSet.read(p)
    return run


# ---------------------------------------------------------------- one cell


@dataclass
class CellResult:
    model: Model
    train_result: TrainResult
    report: FitReport


def train_and_evaluate(run: Run, architecture: str, labels: ExprLabelSet, cfg: dict | None = None,
                       on_epoch=None) -> CellResult:
    cfg = cfg or run.config
    spec = model_spec(cfg, architecture)
    tcfg = train_config(cfg)
    data = run.encoded
    y = labels.standardized
    model = Model(spec, run.encoder, m=data.cat_ids.shape[1], seed=tcfg.seed)
    result = train(model, data.subset(run.train_idx), y[run.train_idx], tcfg, on_epoch=on_epoch)
    ev = cfg["eval"]
    report = evaluate(model, data.subset(run.test_idx), y[run.test_idx], raw_targets=labels.raw[run.test_idx],
                      target_mean=labels.mean, target_std=labels.std,
                      n_permutations=int(ev.get("n_permutations", 199)), seed=int(ev.get("seed", 0)),
                      encoder=run.encoder, task=labels.expression.name)
    return CellResult(model, result, report)


def run_cell(run: Run, architecture: str, task: str, cfg: dict | None = None, on_epoch=None) -> CellResult:
    return train_and_evaluate(run, architecture, run.label(task), cfg, on_epoch)
