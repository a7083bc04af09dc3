"""Exact evaluation of expert symbolic expressions over event sequences.

These are the regression targets of symbolic testing. ``count_distinct`` is
evaluated in the two-stage form (conditional frequency table, then the number
of entities with positive frequency) and checked against a direct set size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .datagen import Event, Sample, Sequence
from .errors import ConfigError

OPERATORS = (
    "sum", "count", "average",
    "decay_sum", "decay_count", "decay_average",
    "ratio_sum_sum", "ratio_count_count", "ratio_sum_average",
    "count_distinct",
)
DECAY_OPS = ("decay_sum", "decay_count", "decay_average")
RATIO_OPS = ("ratio_sum_sum", "ratio_count_count", "ratio_sum_average")
SELECTORS = ("n1", "n3", "n1*n3", "n1+n3", "n1/n3")
SELECTOR_EPS = 1e-6
# numeric attribute positions of "first" and "third"
N1, N3 = 0, 2


def select_value(selector: str, event: Event) -> float:
    a, b = event.num[N1], event.num[N3]
    if selector == "n1":
        return a
    if selector == "n3":
        return b
    if selector == "n1*n3":
        return a * b
    if selector == "n1+n3":
        return a + b
    if selector == "n1/n3":
        return a / max(b, SELECTOR_EPS)
    raise ConfigError(f"unknown value selector {selector!r}")


def attribute(event: Event, name: str) -> float:
    if name == "hour":
        return event.hour
    if name == "t":
        return event.t
    if name.startswith("cat"):
        return event.cat[int(name[3:])]
    if name.startswith("num"):
        return event.num[int(name[3:])]
    raise ConfigError(f"unknown attribute {name!r}")


@dataclass(frozen=True)
class Condition:
    """Conjunction of inclusive range tests ``lo <= attribute <= hi``."""

    ranges: tuple[tuple[str, float, float], ...] = ()

    def __call__(self, event: Event) -> bool:
        return all(lo <= attribute(event, name) <= hi for name, lo, hi in self.ranges)

    @classmethod
    def hour_between(cls, lo: int, hi: int) -> "Condition":
        return cls((("hour", lo, hi),))

    def to_list(self) -> list:
        return [list(r) for r in self.ranges]

    @classmethod
    def from_list(cls, items) -> "Condition":
        return cls(tuple((str(n), float(lo), float(hi)) for n, lo, hi in items or ()))


ALWAYS = Condition()
NIGHT = Condition.hour_between(1, 5)


@dataclass(frozen=True)
class SymbolicExpr:
    """One expert feature.

    For ratio operators the numerator uses ``value_selector``/``condition`` and
    the denominator ``denominator_selector``/``denominator_condition``.
    """

    operator: str
    value_selector: str = "n1"
    condition: Condition = ALWAYS
    distinct_field: int | None = None
    decay_lambda: float | None = None
    denominator_selector: str | None = None
    denominator_condition: Condition = ALWAYS
    sequence_index: int = 0
    name: str = ""

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}")
        if self.operator == "count_distinct" and self.distinct_field is None:
            raise ConfigError("count_distinct needs distinct_field")
        if self.operator in DECAY_OPS and not (self.decay_lambda and self.decay_lambda > 0):
            raise ConfigError("decay operators need decay_lambda > 0")
        for sel in (self.value_selector, self.denominator_selector):
            if sel is not None and sel not in SELECTORS:
                raise ConfigError(f"unknown value selector {sel!r}")
        if not self.name:
            object.__setattr__(self, "name", self.operator)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["condition"] = self.condition.to_list()
        d["denominator_condition"] = self.denominator_condition.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicExpr":
        d = dict(d)
        d["condition"] = Condition.from_list(d.get("condition"))
        d["denominator_condition"] = Condition.from_list(d.get("denominator_condition"))
        return cls(**d)


def _safe_div(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def _weights(events: Seq[Event], lam: float | None) -> list[float]:
    if lam is None or not events:
        return [1.0] * len(events)
    t_now = events[-1].t
    return [math.exp(-lam * (t_now - e.t)) for e in events]


def _sum(events, selector, cond, weights) -> float:
    return math.fsum(w * select_value(selector, e) for e, w in zip(events, weights) if cond(e))


def _count(events, cond, weights) -> float:
    return math.fsum(w for e, w in zip(events, weights) if cond(e))


def eval_expr(expr: SymbolicExpr, sequence: Sequence) -> float:
    events = sequence.events
    op = expr.operator
    if op == "count_distinct":
        return float(eval_count_distinct(expr, sequence))
    w = _weights(events, expr.decay_lambda if op in DECAY_OPS else None)
    sel, cond = expr.value_selector, expr.condition
    if op in ("sum", "decay_sum"):
        return _sum(events, sel, cond, w)
    if op in ("count", "decay_count"):
        return _count(events, cond, w)
    if op in ("average", "decay_average"):
        return _safe_div(_sum(events, sel, cond, w), _count(events, cond, w))
    den_sel = expr.denominator_selector or sel
    den_cond = expr.denominator_condition
    if op == "ratio_sum_sum":
        return _safe_div(_sum(events, sel, cond, w), _sum(events, den_sel, den_cond, w))
    if op == "ratio_count_count":
        return _safe_div(_count(events, cond, w), _count(events, den_cond, w))
    # ratio_sum_average
    den = _safe_div(_sum(events, den_sel, den_cond, w), _count(events, den_cond, w))
    return _safe_div(_sum(events, sel, cond, w), den)


def eval_count_distinct(expr: SymbolicExpr, sequence: Sequence) -> int:
    """Group-by frequency table under the condition, then count positive entries."""
    freq: dict[int, int] = {}
    f = expr.distinct_field
    for e in sequence.events:
        value = e.cat[f]
        freq[value] = freq.get(value, 0) + (1 if expr.condition(e) else 0)
    return sum(1 for c in freq.values() if c > 0)


def count_distinct_direct(expr: SymbolicExpr, sequence: Sequence) -> int:
    return len({e.cat[expr.distinct_field] for e in sequence.events if expr.condition(e)})


# ---------------------------------------------------------------- labelling


@dataclass
class ExprLabelSet:
    expression: SymbolicExpr
    raw: np.ndarray
    mean: float
    std: float
    train_idx: np.ndarray | None = field(default=None, repr=False)

    @property
    def standardized(self) -> np.ndarray:
        return (self.raw - self.mean) / self.std

    def destandardize(self, values) -> np.ndarray:
        return np.asarray(values) * self.std + self.mean

    def write(self, path: str | Path) -> None:
        """Labels JSONL plus an ``<path>.expr.json`` descriptor."""
        path = Path(path)
        std = self.standardized
        with path.open("w", encoding="utf-8") as fh:
            for i, (r, s) in enumerate(zip(self.raw.tolist(), std.tolist())):
                fh.write(json.dumps({"sample_id": i, "raw_target": r, "standardized_target": s}) + "\n")
        desc = {"expression": self.expression.to_dict(), "mean": self.mean, "std": self.std,
                "train_idx": None if self.train_idx is None else self.train_idx.tolist()}
        path.with_name(path.name + ".expr.json").write_text(json.dumps(desc, indent=1), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "ExprLabelSet":
        path = Path(path)
        desc = json.loads(path.with_name(path.name + ".expr.json").read_text(encoding="utf-8"))
        rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        rows.sort(key=lambda r: r["sample_id"])
        raw = np.array([r["raw_target"] for r in rows], dtype=float)
        train_idx = desc.get("train_idx")
        return cls(SymbolicExpr.from_dict(desc["expression"]), raw, float(desc["mean"]), float(desc["std"]),
                   None if train_idx is None else np.asarray(train_idx, dtype=np.int64))


def targets(expr: SymbolicExpr, dataset: Seq[Sample]) -> np.ndarray:
    return np.array([eval_expr(expr, s.sequences[expr.sequence_index]) for s in dataset], dtype=float)


def label_dataset(expr: SymbolicExpr, dataset: Seq[Sample], train_idx=None) -> ExprLabelSet:
    """Evaluate ``expr`` per sample; standardise with train-split statistics."""
    if not dataset:
        raise ValueError("label_dataset needs a non-empty dataset")
    raw = targets(expr, dataset)
    ref = raw if train_idx is None else raw[np.asarray(train_idx)]
    std = float(ref.std())
    if not std > 0:
        raise ConfigError(f"task {expr.name!r} is degenerate: constant target {ref[0]!r}")
    return ExprLabelSet(expr, raw, float(ref.mean()), std,
                        None if train_idx is None else np.asarray(train_idx, dtype=np.int64))


# ---------------------------------------------------------------- task catalog


def default_decay_lambda(dataset: Seq[Sample], sequence_index: int = 0) -> float:
    """ln 2 over the median event age, so the median-aged event gets weight 1/2."""
    return math.log(2) / median_event_age(dataset, sequence_index)


def median_event_age(dataset: Seq[Sample], sequence_index: int = 0) -> float:
    ages = [s.sequences[sequence_index].events[-1].t - e.t
            for s in dataset for e in s.sequences[sequence_index].events]
    med = float(np.median(ages)) if ages else 0.0
    return med if med > 0 else 1.0


TASK_NAMES = (
    "sum", "count", "average", "decay_sum", "decay_count", "decay_average",
    "sum/sum", "count/count", "sum/average", "distinct",
)


def task_catalog(seed: int = 0, decay_lambda: float = math.log(2) / 24.0,
                 distinct_field: int = 0) -> dict[str, SymbolicExpr]:
    """The symbolic tasks, with each value selector drawn from the interaction catalog.

    Ratio numerators and denominators use different selectors; ``count/count`` is the
    share of events inside business hours.
    """
    rng = np.random.default_rng(seed)

    def draw(exclude: str | None = None) -> str:
        choices = [s for s in SELECTORS if s != exclude]
        return choices[int(rng.integers(len(choices)))]

    tasks = {}
    for op in ("sum", "average", "decay_sum", "decay_average"):
        tasks[op] = SymbolicExpr(op, value_selector=draw(), decay_lambda=decay_lambda if op in DECAY_OPS else None,
                                 name=op)
    tasks["count"] = SymbolicExpr("count", name="count")
    tasks["decay_count"] = SymbolicExpr("decay_count", decay_lambda=decay_lambda, name="decay_count")
    num = draw()
    tasks["sum/sum"] = SymbolicExpr("ratio_sum_sum", value_selector=num, denominator_selector=draw(num),
                                    name="sum/sum")
    tasks["count/count"] = SymbolicExpr("ratio_count_count", condition=Condition.hour_between(8, 19),
                                        name="count/count")
    num = draw()
    tasks["sum/average"] = SymbolicExpr("ratio_sum_average", value_selector=num, denominator_selector=draw(num),
                                        name="sum/average")
    tasks["distinct"] = SymbolicExpr("count_distinct", condition=NIGHT, distinct_field=distinct_field,
                                     name="distinct")
    return {name: tasks[name] for name in TASK_NAMES}
