from __future__ import annotations

import json

import numpy as np
import pytest

from shoring.datagen import (NULL_EVENT, GeneratorConfig, Sample, Sequence, generate_dataset, pad_and_mask,
                             read_header, read_jsonl, split, split_indices, write_jsonl)
from shoring.errors import ConfigError, ParseError, VersionError

from conftest import make_event, make_sequence


def test_generation_is_bit_identical():
    cfg = GeneratorConfig(n_samples=10, m=1, min_len=10, max_len=50, seed=7)
    assert generate_dataset(cfg) == generate_dataset(cfg)


def test_different_seed_differs():
    a = generate_dataset(GeneratorConfig(n_samples=5, max_len=20, seed=1))
    b = generate_dataset(GeneratorConfig(n_samples=5, max_len=20, seed=2))
    assert a != b


def test_first_field_vocab_bound():
    ds = generate_dataset(GeneratorConfig.preset("synthetic-1", n_samples=50, max_len=40, seed=0))
    assert all(0 < e.cat[0] < 10 for s in ds for seq in s.sequences for e in seq.events)


def test_presets_set_first_field():
    assert [GeneratorConfig.preset(f"synthetic-{i}").vocab_sizes[0] for i in range(1, 5)] == [10, 20, 50, 100]
    with pytest.raises(ConfigError):
        GeneratorConfig.preset("synthetic-9")


def test_mean_length_uniform():
    ds = generate_dataset(GeneratorConfig(n_samples=2000, min_len=10, max_len=50, seed=0))
    lengths = [len(s.sequences[0]) for s in ds]
    assert min(lengths) >= 10 and max(lengths) <= 50
    assert 28 <= np.mean(lengths) <= 32


def test_timestamps_nondecreasing_and_m_sequences():
    ds = generate_dataset(GeneratorConfig(n_samples=20, m=3, max_len=30, seed=4))
    for s in ds:
        assert len(s.sequences) == 3
        for seq in s.sequences:
            t = [e.t for e in seq.events]
            assert t == sorted(t) and t[0] >= 0
            assert all(np.isfinite(e.num).all() and min(e.num) > 0 for e in seq.events)


def test_count_distinct_field_vocab_too_small():
    cfg = GeneratorConfig(vocab_sizes=(1, 6, 6, 7, 8, 9, 9, 11, 12))
    with pytest.raises(ConfigError, match="vocab"):
        cfg.validate()
    with pytest.raises(ConfigError):
        generate_dataset(cfg)


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="wobble"):
        GeneratorConfig.from_dict({"n_samples": 3, "wobble": 1})


def test_sharding_preserves_order():
    base = GeneratorConfig(n_samples=25, max_len=15, seed=5, shard_size=10)
    small = GeneratorConfig(n_samples=12, max_len=15, seed=5, shard_size=10)
    assert generate_dataset(small) == generate_dataset(base)[:12]


# ---------------------------------------------------------------- pad_and_mask


def _seq(n):
    return make_sequence([make_event(hour=i) for i in range(n)])


def test_pad_short():
    padded, mask = pad_and_mask(_seq(3), 5)
    assert mask.tolist() == [1, 1, 1, 0, 0]
    assert padded.events[3] == NULL_EVENT and padded.events[4] == NULL_EVENT


def test_truncate_keeps_recent():
    seq = _seq(8)
    padded, mask = pad_and_mask(seq, 5)
    assert mask.tolist() == [1] * 5
    assert padded.events == seq.events[-5:]


def test_pad_empty():
    _, mask = pad_and_mask(Sequence((), "e"), 4)
    assert mask.tolist() == [0, 0, 0, 0]


def test_padding_transparency():
    seq = _seq(4)
    padded, mask = pad_and_mask(seq, 9)
    vals = np.array([e.num[0] + e.t for e in padded.events])
    assert float((vals * mask).sum()) == sum(e.num[0] + e.t for e in seq.events)


def test_null_event_layout():
    assert set(NULL_EVENT.cat) == {0} and set(NULL_EVENT.num) == {0.0} and NULL_EVENT.t == 0.0


# ---------------------------------------------------------------- split


def test_split_sizes_and_determinism():
    data = list(range(100))
    tr, te = split_indices(100, 0.8, seed=3)
    assert len(tr) == 80 and len(te) == 20
    tr2, te2 = split_indices(100, 0.8, seed=3)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    assert sorted(np.concatenate([tr, te]).tolist()) == data


def test_split_samples():
    ds = generate_dataset(GeneratorConfig(n_samples=10, max_len=12, seed=0))
    a, b = split(ds, 0.7, seed=1)
    assert len(a) == 7 and len(b) == 3
    assert sorted(map(id, a + b)) == sorted(map(id, ds))


def test_split_bad_fraction():
    with pytest.raises(ValueError):
        split_indices(10, 1.0, 0)


# ---------------------------------------------------------------- JSONL


def test_roundtrip(tmp_path):
    cfg = GeneratorConfig(n_samples=15, m=2, max_len=20, seed=9)
    ds = generate_dataset(cfg)
    path = tmp_path / "d.jsonl"
    write_jsonl(ds, path, cfg)
    assert read_jsonl(path) == ds
    assert read_header(path)["generator_config"]["seed"] == 9


def test_roundtrip_labels(tmp_path):
    ds = [Sample((_seq(2),), label=3), Sample((_seq(1),), label=0.1 + 0.2)]
    path = tmp_path / "l.jsonl"
    write_jsonl(ds, path)
    back = read_jsonl(path)
    assert back[0].label == 3 and isinstance(back[0].label, int)
    assert back[1].label == 0.1 + 0.2


def test_truncated_line_reports_line(tmp_path):
    ds = generate_dataset(GeneratorConfig(n_samples=3, max_len=12, seed=0))
    path = tmp_path / "d.jsonl"
    write_jsonl(ds, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 25])
    with pytest.raises(ParseError) as err:
        read_jsonl(path)
    assert err.value.line == 3


def test_empty_file(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert read_jsonl(path) == []


def test_schema_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl([], path)
    header = path.with_name("d.jsonl.header.json")
    header.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(VersionError):
        read_jsonl(path)
