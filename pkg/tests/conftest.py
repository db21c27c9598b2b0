import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dqulearn import kernels  # noqa: E402


@pytest.fixture(params=sorted(kernels.implementations()))
def kernel_impl(request, monkeypatch):
    """Run a test once per available kernel implementation."""
    impl = kernels.implementations()[request.param]
    for name in ("apply_gate", "run_circuit", "prob_zero"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
