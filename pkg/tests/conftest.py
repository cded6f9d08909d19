from __future__ import annotations

import numpy as np
import pytest

from lossagent.config import parse_config

ACCEPTANCE_LINES: list[str] = []


def toy_config(**overrides):
    base = dict(
        stages=4,
        iterations_per_stage=20,
        learning_rate=0.05,
        test_set_size=3,
        dataset=dict(count=4, height=16, width=16),
        backend=dict(kind="scripted", script="hill_climb"),
    )
    base.update(overrides)
    return parse_config(base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_differences(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (independent of any library code)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
