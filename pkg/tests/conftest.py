import os
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from escmlab.neural import FieldSchema, TrainConfig, init_params

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_batch(features, o, r):
    return SimpleNamespace(
        features=np.asarray(features, dtype=np.int64),
        o=np.asarray(o, dtype=np.float64),
        r=np.asarray(r, dtype=np.float64),
    )


@pytest.fixture
def small_schema():
    return FieldSchema(3, (4, 5, 3), 4)


@pytest.fixture
def small_config():
    return TrainConfig(hidden_sizes=(8, 4), learning_rate=1e-2, batch_size=16, max_steps=50, eval_every=10)


@pytest.fixture
def random_batch(small_schema):
    rng = np.random.default_rng(3)
    n = 12
    feats = np.column_stack([rng.integers(0, c, n) for c in small_schema.cardinalities])
    o = rng.integers(0, 2, n)
    o[:3] = 1
    r = o * rng.integers(0, 2, n)
    r[0] = 1
    return make_batch(feats, o, r)


@pytest.fixture
def small_params(small_schema, small_config):
    return init_params(small_schema, small_config, seed=7, with_imp=True)


_CRITERIA: dict = {}


@pytest.fixture
def report_criterion():
    """Record one acceptance line; returns the verdict so tests can assert on it."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
