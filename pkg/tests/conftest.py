"""Shared grids, profiles and (expensive) branches, computed once per session."""
import numpy as np
import pytest

from nlsbranch.core import Grid, ProblemSpec
from nlsbranch.continuation import (ContinuationConfig, continue_branch, make_branch,
                                    seed_from_zero, switch_branch)
from nlsbranch.limiting import solve_uinfinity
from nlsbranch.potential import linear_ground_state, poschl_teller_wells

# acceptance grids: physical L = 30, h = 0.002; renormalized L = 80, h = 0.01
PHYS = Grid("line", 30.0, 30001)
RENO = Grid("line", 80.0, 16001)
DESK = Grid("line", 30.0, 6001)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grids():
    return PHYS, RENO


@pytest.fixture(scope="session")
def single_well():
    return poschl_teller_wells([(2.0, 0.0)])


@pytest.fixture(scope="session")
def double_well():
    return poschl_teller_wells([(2.0, -4.0), (2.0, 4.0)])


@pytest.fixture(scope="session")
def uinf1():
    return solve_uinfinity(sigma=-1.0, p=1.0, n=1)


@pytest.fixture(scope="session")
def lin_single(single_well):
    return linear_ground_state(single_well, PHYS)


@pytest.fixture(scope="session")
def single_branch(single_well, lin_single):
    """Focusing p = 1 ground branch of the single well from a = 0.1 up to E = 100."""
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    seed = seed_from_zero(P, lin_single, 0.1)
    b = make_branch("single", P, PHYS, RENO, seed, {"kind": "zero", "amplitude": 0.1})
    continue_branch(b, 1, ContinuationConfig(E_max=100.0, step=0.01))
    return b


@pytest.fixture(scope="session")
def symmetric_branch(double_well):
    """Symmetry-enforced ground branch of the double well up to E = 100."""
    P = ProblemSpec(-1.0, 1.0, 1, double_well)
    lin = linear_ground_state(double_well, PHYS)
    seed = seed_from_zero(P, lin, 0.01)
    b = make_branch("sym", P, PHYS, RENO, seed, {"kind": "zero", "amplitude": 0.01},
                    symmetric=True)
    continue_branch(b, 1, ContinuationConfig(E_max=100.0, step=1e-4, step_min=1e-7,
                                             symmetric=True))
    return b


@pytest.fixture(scope="session")
def switched_branch(symmetric_branch):
    ev = [e for e in symmetric_branch.events if e.kind == "simple_crossing"][0]
    return switch_branch(ev, symmetric_branch, 0.05, ContinuationConfig(E_max=100.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def defocusing_branch(single_well, lin_single):
    """Defocusing p = 1 branch of the single well from a = 0.05 down to E_min = 0.05."""
    P = ProblemSpec(1.0, 1.0, 1, single_well)
    seed = seed_from_zero(P, lin_single, 0.05)
    b = make_branch("defocusing", P, PHYS, RENO, seed, {"kind": "zero", "amplitude": 0.05})
    continue_branch(b, -1, ContinuationConfig(E_min=0.05, step=0.01))
    return b


@pytest.fixture(scope="session")
def supercritical_branch(single_well):
    """p = 3 single-well branch from a one-profile seed at E = 100 down to E = 90."""
    from nlsbranch.limiting import ProfileTemplate
    from nlsbranch.continuation import seed_from_infinity
    P = ProblemSpec(-1.0, 3.0, 1, single_well)
    prof = solve_uinfinity(sigma=-1.0, p=3.0, n=1)
    seed = seed_from_infinity(P, ProfileTemplate([0.0], [1], 100.0), prof, grid=RENO)
    b = make_branch("p3", P, PHYS, RENO, seed, {"kind": "infinity"})
    continue_branch(b, -1, ContinuationConfig(E_min=90.0, step=1.0, fixed_step=True))
    return b
