"""Feature encoding of raw events into fixed-width numeric vectors.

Layout of an encoded event (width ``d_e``)::

    [embedding slot ids | one-hot fields | boolean 3-way | id bits | month | weekday | hour
     | prev gap | latest gap | numericals]

Embedding slots carry dense category ids (0 null, 1 lowfreq, 2.. kept values)
that the event network looks up in trainable tables.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .datagen import HOURS_PER_DAY, N_CATEGORICAL, N_NUMERICAL, Event, Sample, Sequence
from .errors import ContractViolation, VersionError

ENCODER_VERSION = 1
FIELD_KINDS = ("embedding", "onehot", "binary", "boolean")
NULL_ID, LOWFREQ_ID = 0, 1
N_MONTHS, N_WEEKDAYS = 12, 7
TIME_WIDTH = N_MONTHS + N_WEEKDAYS + HOURS_PER_DAY + 2
CLIP_PERCENTILES = (1.0, 99.0)


@dataclass
class VocabStats:
    counts: list[dict[int, int]]
    cutoff: int
    kept: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")
        if not self.kept:
            self.kept = [sorted(v for v, c in counts.items() if c >= self.cutoff and v != NULL_ID)
                         for counts in self.counts]
        self._index = [{v: i + 2 for i, v in enumerate(kept)} for kept in self.kept]

    def dense_id(self, field_idx: int, value: int) -> int:
        if value == NULL_ID:
            return NULL_ID
        return self._index[field_idx].get(value, LOWFREQ_ID)

    def n_ids(self, field_idx: int) -> int:
        """Table size for a field: null, lowfreq and every kept value."""
        return len(self.kept[field_idx]) + 2

    def n_entities(self, field_idx: int) -> int:
        """Entities of a field in the assignment matrix (lowfreq + kept values)."""
        return len(self.kept[field_idx]) + 1

    def lookup_table(self, field_idx: int, max_value: int) -> np.ndarray:
        table = np.full(max(max_value + 1, 1), LOWFREQ_ID, dtype=np.int64)
        table[NULL_ID] = NULL_ID
        for v, i in self._index[field_idx].items():
            if v <= max_value:
                table[v] = i
        return table

    def to_dict(self) -> dict:
        return {"cutoff": self.cutoff,
                "counts": [{str(k): v for k, v in sorted(c.items())} for c in self.counts],
                "kept": self.kept}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabStats":
        counts = [{int(k): int(v) for k, v in c.items()} for c in d["counts"]]
        return cls(counts, int(d["cutoff"]), [list(k) for k in d["kept"]])


@dataclass
class EncoderSpec:
    field_kinds: list[str]
    num_min: list[float]
    num_max: list[float]
    prev_gap_range: tuple[float, float]
    last_gap_range: tuple[float, float]
    id_bits: list[int]
    constant_fields: list[str] = field(default_factory=list)
    version: int = ENCODER_VERSION

    def __post_init__(self):
        for lo, hi in zip(self.num_min, self.num_max):
            if lo > hi:
                raise ValueError("min-max range has min > max")

    @property
    def embedding_fields(self) -> list[int]:
        return [i for i, k in enumerate(self.field_kinds) if k == "embedding"]

    def block_widths(self, stats: VocabStats) -> dict[str, int]:
        onehot = sum(stats.n_ids(i) for i, k in enumerate(self.field_kinds) if k == "onehot")
        return {
            "embedding_slots": len(self.embedding_fields),
            "onehot": onehot,
            "boolean": 3 * self.field_kinds.count("boolean"),
            "binary": sum(self.id_bits),
            "time": TIME_WIDTH,
            "numerical": N_NUMERICAL,
        }

    def d_e(self, stats: VocabStats) -> int:
        return sum(self.block_widths(stats).values())

    def dense_width(self, stats: VocabStats) -> int:
        return self.d_e(stats) - len(self.embedding_fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prev_gap_range"] = list(self.prev_gap_range)
        d["last_gap_range"] = list(self.last_gap_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        if d.get("version") != ENCODER_VERSION:
            raise VersionError(f"encoder version {d.get('version')!r} != {ENCODER_VERSION}")
        d["prev_gap_range"] = tuple(d["prev_gap_range"])
        d["last_gap_range"] = tuple(d["last_gap_range"])
        return cls(**d)


@dataclass
class Encoder:
    """A fitted (stats, spec) pair, the unit that gets persisted."""

    stats: VocabStats
    spec: EncoderSpec

    @property
    def d_e(self) -> int:
        return self.spec.d_e(self.stats)

    def to_dict(self) -> dict:
        return {"version": ENCODER_VERSION, "stats": self.stats.to_dict(), "spec": self.spec.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        if d.get("version") != ENCODER_VERSION:
            raise VersionError(f"encoder version {d.get('version')!r} != {ENCODER_VERSION}")
        return cls(VocabStats.from_dict(d["stats"]), EncoderSpec.from_dict(d["spec"]))

    def fingerprint(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _gaps(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    prev = np.zeros_like(times)
    if times.size:
        prev[1:] = np.diff(times)
        latest = times[-1] - times
    else:
        latest = times.copy()
    return prev, latest


def _clip_range(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return 0.0, 0.0
    lo, hi = np.percentile(values, CLIP_PERCENTILES)
    return float(lo), float(hi)


def fit_encoder(train: Seq[Sample], lowfreq_cutoff: int = 5,
                field_kinds: Seq[str] | None = None) -> tuple[VocabStats, EncoderSpec]:
    """Fit frequency tables and min-max ranges on training samples only."""
    if not train:
        raise ValueError("fit_encoder needs non-empty training data")
    kinds = list(field_kinds) if field_kinds is not None else ["embedding"] * N_CATEGORICAL
    if len(kinds) != N_CATEGORICAL or any(k not in FIELD_KINDS for k in kinds):
        raise ValueError(f"field_kinds must be {N_CATEGORICAL} entries from {FIELD_KINDS}")
    counts = [dict() for _ in range(N_CATEGORICAL)]
    nums, prevs, latests = [], [], []
    for sample in train:
        for seq in sample.sequences:
            if not len(seq):
                continue
            cats = np.array([e.cat for e in seq.events])
            for f in range(N_CATEGORICAL):
                vals, cnt = np.unique(cats[:, f], return_counts=True)
                for v, c in zip(vals.tolist(), cnt.tolist()):
                    counts[f][v] = counts[f].get(v, 0) + c
            nums.append(np.array([e.num for e in seq.events]))
            prev, latest = _gaps(np.array([e.t for e in seq.events]))
            prevs.append(prev)
            latests.append(latest)
    stats = VocabStats(counts, lowfreq_cutoff)
    num_all = np.concatenate(nums) if nums else np.zeros((0, N_NUMERICAL))
    ranges = [_clip_range(num_all[:, i]) for i in range(N_NUMERICAL)]
    constant = [f"num{i}" for i, (lo, hi) in enumerate(ranges) if hi <= lo]
    constant += [f"cat{f}" for f in range(N_CATEGORICAL) if len(stats.kept[f]) <= 1]
    id_bits = [id_bit_width(stats.n_ids(f)) if k == "binary" else 0 for f, k in enumerate(kinds)]
    spec = EncoderSpec(
        field_kinds=kinds,
        num_min=[lo for lo, _ in ranges],
        num_max=[hi for _, hi in ranges],
        prev_gap_range=_clip_range(np.concatenate(prevs) if prevs else np.zeros(0)),
        last_gap_range=_clip_range(np.concatenate(latests) if latests else np.zeros(0)),
        id_bits=id_bits,
        constant_fields=constant,
    )
    return stats, spec


def minmax(values, lo: float, hi: float) -> np.ndarray:
    """Min-max to [0, 1] with clipping; a degenerate range maps everything to 0."""
    values = np.asarray(values, dtype=float)
    if hi <= lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def id_bit_width(n: int) -> int:
    return max(1, math.ceil(math.log2(n))) if n > 1 else 1


def encode_id(index: int, n: int) -> np.ndarray:
    """Most-significant-bit-first binary code of ``index`` with ceil(log2 n) bits."""
    if not 0 <= index < n:
        raise ContractViolation(f"id index {index} outside [0, {n})")
    width = id_bit_width(n)
    return np.array([(index >> (width - 1 - b)) & 1 for b in range(width)], dtype=float)


def calendar(t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(month, weekday, hour) of hour-valued timestamps; months are 30-day blocks."""
    t = np.asarray(t, dtype=float)
    hours = np.floor(t).astype(np.int64)
    days = hours // HOURS_PER_DAY
    return (days // 30) % N_MONTHS, days % N_WEEKDAYS, hours % HOURS_PER_DAY


def encode_time(event: Event, previous_timestamps: Seq[float], spec: EncoderSpec,
                latest_t: float | None = None) -> np.ndarray:
    """Month/weekday/hour one-hots plus normalised gaps to the previous and latest event.

    ``previous_timestamps`` are the timestamps of the events before ``event`` in its
    sequence; ``latest_t`` defaults to the event's own time (it is the latest).
    """
    month, weekday, hour = (int(v) for v in calendar(event.t))
    block = np.zeros(TIME_WIDTH)
    block[month] = 1.0
    block[N_MONTHS + weekday] = 1.0
    block[N_MONTHS + N_WEEKDAYS + hour] = 1.0
    prev_gap = event.t - previous_timestamps[-1] if len(previous_timestamps) else 0.0
    latest_gap = (latest_t if latest_t is not None else event.t) - event.t
    block[-2] = minmax(prev_gap, *spec.prev_gap_range)
    block[-1] = minmax(latest_gap, *spec.last_gap_range)
    return block


def _boolean_onehot(value: int) -> list[float]:
    # raw 1 -> true, 2 -> false, anything else (incl. null) -> none
    if value == 1:
        return [1.0, 0.0, 0.0]
    if value == 2:
        return [0.0, 1.0, 0.0]
    return [0.0, 0.0, 1.0]


def encode_event(event: Event, spec: EncoderSpec, stats: VocabStats,
                 previous_timestamps: Seq[float] = (), latest_t: float | None = None) -> np.ndarray:
    slots, onehots, bools, bits = [], [], [], []
    for f, kind in enumerate(spec.field_kinds):
        dense = stats.dense_id(f, event.cat[f])
        if kind == "embedding":
            slots.append(float(dense))
        elif kind == "onehot":
            v = np.zeros(stats.n_ids(f))
            v[dense] = 1.0
            onehots.append(v)
        elif kind == "boolean":
            bools.extend(_boolean_onehot(event.cat[f]))
        else:
            bits.append(encode_id(dense, stats.n_ids(f)))
    nums = [minmax(event.num[i], spec.num_min[i], spec.num_max[i]) for i in range(N_NUMERICAL)]
    return np.concatenate([
        np.array(slots, dtype=float),
        *onehots,
        np.array(bools, dtype=float),
        *bits,
        encode_time(event, previous_timestamps, spec, latest_t),
        np.array(nums, dtype=float),
    ])


def encode_sequence_events(seq: Sequence, spec: EncoderSpec, stats: VocabStats) -> np.ndarray:
    """Per-event reference encoder; rows follow ``seq.events``."""
    times = [e.t for e in seq.events]
    latest = times[-1] if times else None
    return np.array([encode_event(e, spec, stats, times[:j], latest) for j, e in enumerate(seq.events)])


# ---------------------------------------------------------------- batched encoding


@dataclass
class EncodedData:
    """Dense arrays for ``n`` samples, ``m`` sequences, ``tau`` positions.

    ``cat_ids``: (n, m, tau, n_embedding_fields) dense ids, 0 at padding.
    ``dense``: (n, m, tau, dense_width) float features, 0 at padding.
    ``mask``: (n, m, tau) 1 for real events.
    ``entities``: (n, m, tau, n_tracked) global entity rows, -1 at padding.
    """

    cat_ids: np.ndarray
    dense: np.ndarray
    mask: np.ndarray
    entities: np.ndarray

    def __len__(self) -> int:
        return self.mask.shape[0]

    def subset(self, idx) -> "EncodedData":
        return EncodedData(self.cat_ids[idx], self.dense[idx], self.mask[idx], self.entities[idx])


@dataclass(frozen=True)
class EntityLayout:
    """Field-major entity rows for the assignment matrix."""

    tracked_fields: tuple[int, ...]
    sizes: tuple[int, ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def d_p(self) -> int:
        return int(sum(self.sizes))

    def field_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    @classmethod
    def from_stats(cls, stats: VocabStats, tracked_fields: Seq[int] | None = None) -> "EntityLayout":
        tracked = tuple(range(N_CATEGORICAL)) if tracked_fields is None else tuple(tracked_fields)
        return cls(tracked, tuple(stats.n_entities(f) for f in tracked))


def encode_dataset(samples: Seq[Sample], encoder: Encoder, tau: int,
                   layout: EntityLayout | None = None) -> EncodedData:
    """Vectorised equivalent of :func:`encode_event` over padded, truncated sequences."""
    stats, spec = encoder.stats, encoder.spec
    layout = layout or EntityLayout.from_stats(stats)
    n = len(samples)
    m = len(samples[0].sequences) if n else 1
    emb_fields = spec.embedding_fields
    dense_w = spec.dense_width(stats)
    cat_ids = np.zeros((n, m, tau, len(emb_fields)), dtype=np.int64)
    dense = np.zeros((n, m, tau, dense_w))
    mask = np.zeros((n, m, tau), dtype=np.int8)
    entities = np.full((n, m, tau, len(layout.tracked_fields)), -1, dtype=np.int64)
    max_raw = max((max((max(e.cat) for e in s.events), default=0) for smp in samples for s in smp.sequences),
                  default=0)
    tables = [stats.lookup_table(f, max_raw) for f in range(N_CATEGORICAL)]
    offsets = layout.offsets

    for i, sample in enumerate(samples):
        for j, seq in enumerate(sample.sequences):
            events = seq.events[-tau:]
            L = len(events)
            if L == 0:
                continue
            mask[i, j, :L] = 1
            raw = np.array([e.cat for e in events], dtype=np.int64)
            ids = np.stack([tables[f][raw[:, f]] for f in range(N_CATEGORICAL)], axis=1)
            times = np.array([e.t for e in events])
            nums = np.array([e.num for e in events])
            cat_ids[i, j, :L] = ids[:, emb_fields]
            for col, f in enumerate(layout.tracked_fields):
                entities[i, j, :L, col] = offsets[col] + ids[:, f] - 1
            blocks = []
            for f, kind in enumerate(spec.field_kinds):
                if kind == "onehot":
                    blocks.append(np.eye(stats.n_ids(f))[ids[:, f]])
                elif kind == "boolean":
                    blocks.append(np.array([_boolean_onehot(v) for v in raw[:, f]]))
                elif kind == "binary":
                    blocks.append(np.array([encode_id(int(v), stats.n_ids(f)) for v in ids[:, f]]))
            month, weekday, hour = calendar(times)
            time_block = np.zeros((L, TIME_WIDTH))
            rows = np.arange(L)
            time_block[rows, month] = 1.0
            time_block[rows, N_MONTHS + weekday] = 1.0
            time_block[rows, N_MONTHS + N_WEEKDAYS + hour] = 1.0
            prev, latest = _gaps(times)
            if len(seq) > L:
                # the first kept event still has a real predecessor
                prev[0] = times[0] - seq.events[-L - 1].t
            time_block[:, -2] = minmax(prev, *spec.prev_gap_range)
            time_block[:, -1] = minmax(latest, *spec.last_gap_range)
            blocks.append(time_block)
            blocks.append(np.column_stack([minmax(nums[:, k], spec.num_min[k], spec.num_max[k])
                                           for k in range(N_NUMERICAL)]))
            dense[i, j, :L] = np.concatenate(blocks, axis=1)
    return EncodedData(cat_ids, dense, mask, entities)
