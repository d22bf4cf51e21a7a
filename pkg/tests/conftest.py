import numpy as np
import pytest

from stabtransport.fe_space import build_space
from stabtransport.mesh import build_structured_mesh

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record():
    """Append a one-line PASS/FAIL verdict to the acceptance summary."""

    def _record(label: str, passed: bool, detail: str = ""):
        line = f"{'PASS' if passed else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


@pytest.fixture
def two_tri():
    return build_structured_mesh(1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def hat_x_minus_y(p):
    """The nodal field (0, 1, 0, 0) on the two-triangle square: x - y below the diagonal, 0 above."""
    return np.maximum(p[..., 0] - p[..., 1], 0.0)


def periodic_space(n, k):
    return build_space(build_structured_mesh(n, n, periodic=(True, True)), k)
