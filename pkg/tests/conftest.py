import time

import numpy as np
import pytest

from catattn.config import load_config
from catattn.training import train

# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _timed_desk_run(attention: str):
    t0 = time.perf_counter()
    cfg = load_config(overrides=[f"attention={attention}", "max_steps=200"])
    result = train(cfg)
    return cfg, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_cat_run():
    """Default desk preset with the full CAT block, capped at 200 steps."""
    return _timed_desk_run("full_cat")


@pytest.fixture(scope="session")
def desk_baseline_run():
    return _timed_desk_run("none")
