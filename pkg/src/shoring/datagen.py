"""Event/sequence/sample data model and the synthetic dataset generator."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, ParseError, VersionError

SCHEMA_VERSION = 1
N_CATEGORICAL = 9
N_NUMERICAL = 4
HOURS_PER_DAY = 24

# Index 0 is the null/padding entity in every field, so a field with
# vocabulary size V draws real values from 1..V-1. The eight trailing fields
# hold 60 real entities in total, matching the 70/80/100/160 category totals
# of the four synthetic presets once the first field is added.
DEFAULT_VOCAB = (10, 6, 6, 7, 8, 9, 9, 11, 12)
PRESET_FIRST_FIELD = {"synthetic-1": 10, "synthetic-2": 20, "synthetic-3": 50, "synthetic-4": 100}


@dataclass(frozen=True)
class Event:
    cat: tuple[int, ...]
    num: tuple[float, ...]
    t: float

    @property
    def hour(self) -> int:
        return int(math.floor(self.t)) % HOURS_PER_DAY

    @property
    def is_null(self) -> bool:
        return self == NULL_EVENT


NULL_EVENT = Event(cat=(0,) * N_CATEGORICAL, num=(0.0,) * N_NUMERICAL, t=0.0)


@dataclass(frozen=True)
class Sequence:
    events: tuple[Event, ...]
    sequence_id: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


@dataclass(frozen=True)
class Sample:
    sequences: tuple[Sequence, ...]
    label: float = 0.0


Dataset = list  # list[Sample]


@dataclass
class GeneratorConfig:
    """Parameters of the synthetic generator.

    Categorical draws follow a truncated Zipf law over 1..V-1, numerical
    attributes are ``num_shift + LogNormal(mu, sigma)`` and timestamps (in
    hours) accumulate exponential inter-arrival gaps after a uniform start.
    """

    n_samples: int = 2000
    m: int = 1
    vocab_sizes: tuple[int, ...] = DEFAULT_VOCAB
    min_len: int = 10
    max_len: int = 300
    zipf_exponents: tuple[float, ...] = (1.0,) * N_CATEGORICAL
    num_mu: tuple[float, ...] = (0.0,) * N_NUMERICAL
    num_sigma: tuple[float, ...] = (0.5,) * N_NUMERICAL
    num_shift: float = 1.0
    mean_gap_hours: float = 1.5
    start_span_hours: float = 24.0 * 365
    seed: int = 0
    shard_size: int = 1000

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.zipf_exponents = tuple(float(v) for v in self.zipf_exponents)
        self.num_mu = tuple(float(v) for v in self.num_mu)
        self.num_sigma = tuple(float(v) for v in self.num_sigma)

    def validate(self) -> None:
        if self.n_samples < 0 or self.m < 1:
            raise ConfigError("n_samples must be >= 0 and m >= 1")
        if len(self.vocab_sizes) != N_CATEGORICAL or len(self.zipf_exponents) != N_CATEGORICAL:
            raise ConfigError(f"need {N_CATEGORICAL} vocabulary sizes and Zipf exponents")
        if len(self.num_mu) != N_NUMERICAL or len(self.num_sigma) != N_NUMERICAL:
            raise ConfigError(f"need {N_NUMERICAL} numerical distribution parameters")
        if self.vocab_sizes[0] < 2:
            raise ConfigError("vocab_sizes[0]: the count-distinct field needs a vocabulary of at least 2")
        if any(v < 2 for v in self.vocab_sizes):
            raise ConfigError("every vocabulary needs at least one non-null value (size >= 2)")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.mean_gap_hours <= 0 or self.shard_size < 1:
            raise ConfigError("mean_gap_hours and shard_size must be positive")
        if any(s <= 0 for s in self.num_sigma):
            raise ConfigError("num_sigma entries must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown generator config key: {unknown[0]}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "GeneratorConfig":
        if name not in PRESET_FIRST_FIELD:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_FIRST_FIELD)}")
        vocab = (PRESET_FIRST_FIELD[name],) + DEFAULT_VOCAB[1:]
        return cls(vocab_sizes=vocab, **overrides)


def _zipf_probs(vocab: int, s: float) -> np.ndarray:
    ranks = np.arange(1, vocab, dtype=float)
    w = ranks ** -s
    return w / w.sum()


def _generate_shard(config: GeneratorConfig, shard: int, count: int) -> list[Sample]:
    rng = np.random.default_rng([config.seed, shard])
    probs = [_zipf_probs(v, s) for v, s in zip(config.vocab_sizes, config.zipf_exponents)]
    samples = []
    for i in range(count):
        sample_index = shard * config.shard_size + i
        seqs = []
        for j in range(config.m):
            n = int(rng.integers(config.min_len, config.max_len + 1))
            cats = np.column_stack([
                rng.choice(np.arange(1, v), size=n, p=p) for v, p in zip(config.vocab_sizes, probs)
            ])
            nums = config.num_shift + rng.lognormal(config.num_mu, config.num_sigma, size=(n, N_NUMERICAL))
            gaps = rng.exponential(config.mean_gap_hours, size=n)
            gaps[0] = 0.0
            times = rng.uniform(0.0, config.start_span_hours) + np.cumsum(gaps)
            events = tuple(
                Event(tuple(int(c) for c in cats[e]), tuple(float(x) for x in nums[e]), float(times[e]))
                for e in range(n)
            )
            seqs.append(Sequence(events, f"s{sample_index}.{j}"))
        samples.append(Sample(tuple(seqs)))
    return samples


def generate_dataset(config: GeneratorConfig) -> list[Sample]:
    """Deterministic in ``config``: shard ``i`` is drawn from ``default_rng([seed, i])``."""
    config.validate()
    out: list[Sample] = []
    n_shards = math.ceil(config.n_samples / config.shard_size)
    for shard in range(n_shards):
        count = min(config.shard_size, config.n_samples - shard * config.shard_size)
        out.extend(_generate_shard(config, shard, count))
    return out


def pad_and_mask(sequence: Sequence, tau: int) -> tuple[Sequence, np.ndarray]:
    """Keep the most recent ``tau`` events and right-pad with null events."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    events = sequence.events[-tau:] if len(sequence) > tau else sequence.events
    mask = np.zeros(tau, dtype=np.int8)
    mask[: len(events)] = 1
    padded = tuple(events) + (NULL_EVENT,) * (tau - len(events))
    return Sequence(padded, sequence.sequence_id), mask


def split(dataset: list[Sample], train_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    train_idx, test_idx = split_indices(len(dataset), train_fraction, seed)
    return [dataset[i] for i in train_idx], [dataset[i] for i in test_idx]


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------- JSONL I/O


def header_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".header.json")


def sample_to_json(sample: Sample) -> dict:
    return {
        "label": sample.label,
        "sequences": [
            [{"cat": list(e.cat), "num": list(e.num), "t": e.t} for e in seq.events]
            for seq in sample.sequences
        ],
    }


def sample_from_json(obj: dict, index: int) -> Sample:
    seqs = []
    for j, raw in enumerate(obj["sequences"]):
        events = tuple(
            Event(tuple(int(c) for c in e["cat"]), tuple(float(x) for x in e["num"]), float(e["t"]))
            for e in raw
        )
        seqs.append(Sequence(events, f"s{index}.{j}"))
    label = obj["label"]
    return Sample(tuple(seqs), label if isinstance(label, int) and not isinstance(label, bool) else float(label))


def write_jsonl(dataset: Iterable[Sample], path: str | Path, config: GeneratorConfig | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for sample in dataset:
            fh.write(json.dumps(sample_to_json(sample), separators=(",", ":")))
            fh.write("\n")
    header = {"schema_version": SCHEMA_VERSION,
              "generator_config": config.to_dict() if config is not None else None}
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")


def read_header(path: str | Path) -> dict | None:
    hp = header_path(path)
    if not hp.exists():
        return None
    header = json.loads(hp.read_text(encoding="utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionError(
            f"dataset schema version {header.get('schema_version')!r} != supported {SCHEMA_VERSION}")
    return header


def read_jsonl(path: str | Path) -> list[Sample]:
    read_header(path)
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(sample_from_json(obj, len(out)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed sample: {exc}", line=lineno) from exc
    return out
