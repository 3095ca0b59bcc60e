import re

import numpy as np
import pytest

from vmstab import profiles as P
from vmstab.discretization import build_grid
from vmstab.equilibrium import solve_equilibrium, solve_psi0_dirichlet

ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def _order(line):
    label = line.split()[1]
    return int(re.match(r"\d+", label).group()), label


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=_order):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def rec(number, name, passed, detail):
        line = "criterion %s %-48s %s  %s" % (number, name, "PASS" if passed else "FAIL", detail)
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return rec


@pytest.fixture(scope="session")
def grid32():
    return build_grid(32)


@pytest.fixture(scope="session")
def homogeneous_unstable():
    """even_p under momentum scaling K = 8: no fields, kappa0 < 0."""
    return solve_equilibrium(P.scale_momentum(P.even_p(), 8.0), 0.0, 0.0, build_grid(32))


@pytest.fixture(scope="session")
def magnetic_eq():
    """Purely magnetic, mirrored species, weak field."""
    return solve_equilibrium(P.maxwellian(), 0.0, 0.1, build_grid(32))


@pytest.fixture(scope="session")
def general_eq():
    return solve_equilibrium(P.maxwellian(), 0.1, 0.1, build_grid(32))


@pytest.fixture(scope="session")
def dirichlet_eq():
    return solve_psi0_dirichlet(P.skew_p(), build_grid(32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
