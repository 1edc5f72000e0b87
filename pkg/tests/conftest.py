import numpy as np
import pytest

from latentloc import kernels


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    with kernels.backend(request.param):
        yield request.param


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
