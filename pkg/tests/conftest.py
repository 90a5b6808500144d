import numpy as np
import pytest

from permfem.fem import CouplingStructure, assemble_operators
from permfem.mesh import build_ambient_grid


@pytest.fixture(scope="session")
def grid1():
    return build_ambient_grid(1)


@pytest.fixture(scope="session")
def grid2():
    return build_ambient_grid(2)


@pytest.fixture(scope="session")
def system2(grid2):
    return grid2, assemble_operators(grid2), CouplingStructure(grid2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one acceptance line: ``record(number, passed, detail)``."""

    def _record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
