import numpy as np
import pytest

from selfalign.encoder import ModelParams
from selfalign.features import SyntheticConfig, generate_synthetic


@pytest.fixture
def small_dataset():
    return generate_synthetic(SyntheticConfig(n_train=8, n_val=12), seed=3)


@pytest.fixture
def model():
    return ModelParams.init(32, 24, 8, 6, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the boolean."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
