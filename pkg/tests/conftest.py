import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lightdetr import kernels  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    """Each kernel implementation that is importable in this environment."""
    return kernels.backends()[request.param]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
