from __future__ import annotations

import numpy as np
import pytest

from defectcv.defect_catalog import build_catalog
from defectcv.tensor_field import make_checkerboard_model


@pytest.fixture(scope="session")
def checkerboard():
    return make_checkerboard_model(3.0, 23.0, 0.5)


@pytest.fixture(scope="session")
def catalog4(checkerboard):
    """Exact two-sided catalog at N=4, r=2 (cheap, reused across modules)."""
    return build_catalog(checkerboard, 4, 2)


@pytest.fixture(scope="session")
def catalog6(checkerboard):
    return build_catalog(checkerboard, 6, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


# -- acceptance summary ---------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on ``ok`` itself."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
