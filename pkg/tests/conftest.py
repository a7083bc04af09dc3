from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shoring.datagen import Event, GeneratorConfig, Sample, Sequence, generate_dataset
from shoring.encode import Encoder, encode_dataset, fit_encoder

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_event(cat0: int = 1, hour: float = 0.0, num=(1.0, 1.0, 1.0, 1.0), day: int = 0, cats=None) -> Event:
    cat = tuple(cats) if cats is not None else (cat0,) + (1,) * 8
    return Event(cat, tuple(float(x) for x in num), float(day * 24 + hour))


def make_sequence(events, sid: str = "s") -> Sequence:
    return Sequence(tuple(events), sid)


def make_sample(events) -> Sample:
    return Sample((make_sequence(events),))


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = GeneratorConfig(n_samples=40, min_len=3, max_len=12, seed=3)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_dataset):
    return Encoder(*fit_encoder(tiny_dataset[:30]))


@pytest.fixture(scope="session")
def tiny_encoded(tiny_dataset, tiny_encoder):
    return encode_dataset(tiny_dataset, tiny_encoder, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
