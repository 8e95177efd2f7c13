import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from svfit import kernels  # noqa: E402

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}

BACKENDS = ["numpy"] + (["numba"] if kernels.numba_available() else [])


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")
