import math

import numpy as np
import pytest

from nlsbranch.core import Field, Grid, ProblemSpec, lp_norm
from nlsbranch.continuation import (PHYSICAL, RENORMALIZED, ContinuationConfig, Discretization,
                                    SolverError, continue_branch, detect_event, enforce_symmetry,
                                    kernel_symmetry, make_branch, natural_tangent, newton_solve,
                                    nonlinear_remainder, residual, seed_from_infinity,
                                    seed_from_zero)
from nlsbranch.continuation.solvers import make_point
from nlsbranch.limiting import ProfileTemplate, profile_fit, solve_uinfinity
from nlsbranch.potential import linear_ground_state, poschl_teller_wells

from conftest import PHYS, RENO

FREE = ProblemSpec(-1.0, 1.0, 1, None)


def soliton(grid, E):
    return Field.from_function(grid, lambda x: math.sqrt(2 * E) / np.cosh(math.sqrt(E) * x))


def dist(a, b):
    return lp_norm(Field(a.grid, a.values - b.values))


# residual and remainder ---------------------------------------------------------

def test_residual_zero(single_well):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    assert np.all(residual(P, Field.zeros(PHYS), 2.0).values == 0)


def test_residual_soliton():
    # h = 4e-4 on [-40, 40]; the sampling error of the Laplacian is O(h^2)
    g = Grid("line", 40.0, 200001)
    U = soliton(g, 1.0)
    assert lp_norm(residual(FREE, U, 1.0)) < 1e-7 * lp_norm(U)


def test_residual_renormalized_limit():
    u = solve_uinfinity(sigma=-1.0, p=1.0, n=1, grid=RENO).u_inf
    for E in (30.0, 100.0):
        assert lp_norm(residual(FREE, u, E, RENORMALIZED)) < 1e-7


def test_remainder_zero(uinf1):
    r = nonlinear_remainder(FREE, uinf1.u_inf, Field.zeros(uinf1.grid))
    assert np.all(r.values == 0)


@pytest.mark.parametrize("p,power", [(1.0, 2.0), (0.4, 1.8)])
def test_remainder_scaling(p, power):
    g = Grid("line", 30.0, 6001)
    P = ProblemSpec(-1.0, p, 1, None)
    U = Field.from_function(g, lambda x: math.sqrt(2) / np.cosh(x))
    w = Field.from_function(g, lambda x: 1 / np.cosh(x / 2))
    ratios = [lp_norm(nonlinear_remainder(P, U, Field(g, t * w.values))) / t ** power
              for t in (1e-1, 1e-2, 1e-3)]
    assert max(ratios) <= 2 * ratios[0]


def test_remainder_quadratic_term():
    # p = 1: N(U, v) = σ(3Uv² + v³) exactly
    g = Grid("line", 10.0, 201)
    U = Field.from_function(g, lambda x: np.exp(-x * x))
    v = Field.from_function(g, lambda x: 0.3 * np.sin(x))
    r = nonlinear_remainder(FREE, U, v).values
    ref = -(3 * U.values * v.values ** 2 + v.values ** 3)
    assert np.max(np.abs(r - ref)) < 1e-14


# Newton ----------------------------------------------------------------------------

@pytest.mark.parametrize("E", [1.0, 4.0])
def test_newton_free_soliton(E):
    U = soliton(PHYS, E)
    exact = newton_solve(FREE, U, E, symmetric=True)
    pt = newton_solve(FREE, Field(PHYS, 1.05 * U.values), E, symmetric=True)
    assert dist(pt.psi, exact.psi) < 1e-8
    # the discrete fixed point differs from the sampled closed form by O(h^2)
    assert dist(pt.psi, U) < 1e-5
    again = newton_solve(FREE, exact.psi, E, symmetric=True)
    assert again.iterations == 0


def test_newton_single_well(single_well, lin_single):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    pt = newton_solve(P, Field(PHYS, 0.6 * lin_single.psi0.values), 1.12)
    assert pt.N > 0
    assert pt.newton_residual < 1e-10 * (1 + math.sqrt(pt.N)) * 1.12
    assert pt.index == 1


def test_newton_failure():
    P = ProblemSpec(-1.0, 1.0, 1, None)
    bad = Field.from_function(Grid("line", 30.0, 601), lambda x: 50 * np.exp(-x * x))
    with pytest.raises(SolverError):
        newton_solve(P, bad, 1.0, max_iter=3)


# seeding -----------------------------------------------------------------------------

def test_seed_from_zero_focusing(single_well, lin_single):
    pt = seed_from_zero(ProblemSpec(-1.0, 1.0, 1, single_well), lin_single, 0.1)
    assert abs(pt.E - (1 + 0.01 / 3)) < 5e-4
    assert abs(pt.extras["E_predicted"] - (1 + 0.01 / 3)) < 1e-5


def test_seed_from_zero_defocusing(single_well, lin_single):
    pt = seed_from_zero(ProblemSpec(1.0, 1.0, 1, single_well), lin_single, 0.1)
    assert abs(pt.E - (1 - 0.01 / 3)) < 5e-4
    assert pt.E < lin_single.E0


def test_seed_small_amplitude_limit(single_well, lin_single):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    prev = None
    for a in (1e-2, 1e-3, 1e-4):
        pt = seed_from_zero(P, lin_single, a)
        gap = pt.E - lin_single.E0
        assert 0 < gap < a
        if prev is not None:
            assert pt.N < prev[0] / 50 and gap < prev[1] / 50
        prev = (pt.N, gap)


def test_seed_errors(single_well, lin_single):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    with pytest.raises(ValueError, match="positive"):
        seed_from_zero(P, lin_single, 0.0)
    with pytest.raises(ValueError):
        seed_from_zero(P, lin_single, 0.5)


def test_seed_from_infinity_single(single_well, uinf1):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    out = []
    for E in (50.0, 100.0):
        pt = seed_from_infinity(P, ProfileTemplate([0.0], [1], E), uinf1, grid=RENO)
        assert pt.frame == RENORMALIZED and pt.index == 1
        out.append(dist(pt.psi, Field(RENO, uinf1(RENO.x))))
    # the distance to u_inf decays like 1/E
    assert 1.8 < out[0] / out[1] < 2.2


@pytest.mark.parametrize("centers,index", [([-4.0, 4.0], 2), ([0.0], 2)])
def test_seed_from_infinity_double(double_well, uinf1, centers, index):
    P = ProblemSpec(-1.0, 1.0, 1, double_well)
    t = ProfileTemplate(centers, [1] * len(centers), 100.0)
    pt = seed_from_infinity(P, t, uinf1, grid=RENO)
    assert pt.index == index


def test_seed_from_infinity_below_switch(single_well, uinf1):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    with pytest.raises(ValueError):
        seed_from_infinity(P, ProfileTemplate([0.0], [1], 10.0), uinf1, grid=RENO)


# symmetry ------------------------------------------------------------------------------

def test_enforce_symmetry():
    g = Grid("line", 10.0, 1001)
    even = Field.from_function(g, lambda x: np.exp(-x * x))
    odd = Field.from_function(g, lambda x: x * np.exp(-x * x))
    assert np.array_equal(enforce_symmetry(even).values, even.values)
    assert np.max(np.abs(enforce_symmetry(odd).values)) < 1e-15
    assert kernel_symmetry(odd) == "odd" and kernel_symmetry(even) == "even"
    with pytest.raises(ValueError):
        enforce_symmetry(Field.zeros(Grid("radial", 10.0, 101, 2)))


# events ------------------------------------------------------------------------------

def test_detect_event_linear_family():
    # on ψ = 0 the lowest L₊ eigenvalue is E - ν² for V = -ν(ν+1)sech²; ν² = 2
    nu = math.sqrt(2)
    P = ProblemSpec(-1.0, 1.0, 1, poschl_teller_wells([(nu * (nu + 1), 0.0)]))
    d = Discretization(P, Grid("line", 30.0, 6001))
    z = np.zeros(d.grid.npoints - 2)
    ev = detect_event(d, make_point(d, z, 1.5, 0.0), make_point(d, z, 2.5, 0.0))
    assert abs(ev.E_star - 2.0) < 1e-3
    assert ev.bracket[1] - ev.bracket[0] < 1e-3 * ev.E_star
    assert ev.kind == "simple_crossing" and ev.symmetry_of_kernel == "even"
    assert ev.inertia_before.n_neg == 1 and ev.inertia_after.n_neg == 0


def test_fold_on_asymmetric_wells(uinf1):
    V = poschl_teller_wells([(2.0, -4.0), (1.9, 4.0)])
    P = ProblemSpec(-1.0, 1.0, 1, V)
    g, gr = Grid("line", 30.0, 6001), Grid("line", 80.0, 8001)
    seed = seed_from_infinity(P, ProfileTemplate([4.0], [1], 25.0), uinf1, grid=gr)
    b = make_branch("fold", P, g, gr, seed)
    continue_branch(b, -1, ContinuationConfig(E_min=0.5, E_max=25.0, step=0.01))
    folds = [e for e in b.events if e.kind == "fold"]
    assert len(folds) == 1
    ev = folds[0]
    assert ev.inertia_after.n_neg == ev.inertia_before.n_neg + 1
    assert abs(ev.eigenvalue) < 1e-6 * max(1.0, ev.E_star)
    # E decreases into the fold and increases after it
    E = b.E
    k = int(np.argmin(E))
    assert np.all(np.diff(E[:k + 1]) <= 0) and np.all(np.diff(E[k:]) >= 0)
    assert abs(E[k] - ev.E_star) < 1e-3


# branch invariants -----------------------------------------------------------------------

def _stationarity(pt, sigma):
    return abs(pt.G + pt.Vterm + sigma * pt.Q + pt.E * pt.N) / (pt.E * pt.N + 1)


def test_single_branch_topology(single_branch, lin_single):
    E = single_branch.E
    assert E[-1] >= 100.0 - 1e-9
    assert np.all(np.diff(E) >= 0)
    assert not single_branch.events
    assert all(p.index == 1 for p in single_branch.points)
    assert np.all(E >= lin_single.E0 - 1e-9)


def test_single_branch_invariants(single_branch):
    for pt in single_branch.points:
        assert _stationarity(pt, -1.0) < 1e-6
        assert abs(pt.lminus_min_eig) < 1e-6 * max(1.0, pt.E)
        v = pt.psi.unknowns
        assert np.all(v > 0) or np.all(v < 0)
    # Q nondecreasing along the branch, frame duplicates included
    Q = single_branch.column("Q")
    assert np.all(np.diff(Q) >= -1e-9 * Q[1:])


def test_tangent_consistency(single_well, lin_single):
    P = ProblemSpec(-1.0, 1.0, 1, single_well)
    b = make_branch("short", P, PHYS, RENO, seed_from_zero(P, lin_single, 0.1))
    continue_branch(b, 1, ContinuationConfig(E_max=1.5, step=0.01, fixed_step=True))
    d = b.disc(PHYSICAL)
    assert len(b.points) > 40
    for a, c in zip(b.points, b.points[1:]):
        dE = c.E - a.E
        assert 0 < dE <= 1e-2 + 1e-12
        # dψ/dE grows like (E - E0)^(-1/2) at the bifurcation from zero
        if a.E - lin_single.E0 < 0.05:
            continue
        fd = (c.psi.unknowns - a.psi.unknowns) / dE
        t = natural_tangent(d, a.psi.unknowns, a.E)
        assert d.norm(fd - t) < 0.1 * d.norm(t)


def test_no_branch_jumping(single_branch):
    for a, b in zip(single_branch.points, single_branch.points[1:]):
        if a.frame != b.frame:
            continue
        d = single_branch.disc(a.frame)
        t = natural_tangent(d, a.psi.unknowns, a.E)
        pred = abs(b.E - a.E) * math.sqrt(1 + d.dot(t, t))
        assert d.norm(b.psi.unknowns - a.psi.unknowns) <= 10 * pred


def test_defocusing_branch(defocusing_branch, lin_single):
    E = defocusing_branch.E
    assert E[-1] <= 0.05 + 1e-9
    assert np.all(np.diff(E) < 0)
    assert np.all(E < lin_single.E0)
    assert not defocusing_branch.events
    for pt in defocusing_branch.points:
        assert pt.lplus_min_eigs[0] > 0
        assert _stationarity(pt, 1.0) < 1e-6


def test_symmetric_branch_crossing(symmetric_branch):
    ev = [e for e in symmetric_branch.events if e.kind == "simple_crossing"]
    assert len(ev) == 1
    e = ev[0]
    assert e.E_star < 100.0
    assert e.symmetry_of_kernel == "odd"
    phi = e.kernel_vector.values
    nrm = lp_norm(e.kernel_vector)
    assert np.max(np.abs(phi + phi[::-1])) < 1e-6 * nrm
    assert abs(e.eigenvalue) < 1e-6 * max(1.0, e.E_star)
    before = [p.index for p in symmetric_branch.points if p.E < e.bracket[0]]
    after = [p.index for p in symmetric_branch.points if p.E > e.bracket[1]]
    assert set(before) == {1} and set(after) == {2}
    for pt in symmetric_branch.points:
        v = pt.psi.values
        assert np.max(np.abs(v - v[::-1])) < 1e-10 * np.max(np.abs(v))


def test_switched_branch(switched_branch, symmetric_branch, uinf1):
    ev = [e for e in symmetric_branch.events if e.kind == "simple_crossing"][0]
    assert all(p.index == 1 for p in switched_branch.points)
    assert switched_branch.seed_kind["kind"] == "switched"
    end = switched_branch.points[-1]
    assert end.E >= 100.0 - 1e-9 and end.frame == RENORMALIZED
    rE = math.sqrt(end.E)
    v = end.psi.values
    side = 1.0 if np.dot(RENO.weights, v * (RENO.x > 0)) > np.dot(RENO.weights, v * (RENO.x < 0)) else -1.0
    fit = profile_fit(end.psi, [uinf1], [4.0 * side * rE], eps=math.inf)
    assert abs(fit.centers[0] / rE - 4.0 * side) < 0.05
    # the branch leaves the parent on the far side of the crossing
    assert min(p.E for p in switched_branch.points) >= ev.E_star - 1e-3


def test_switch_mirror(symmetric_branch, switched_branch):
    from nlsbranch.continuation import switch_branch
    ev = [e for e in symmetric_branch.events if e.kind == "simple_crossing"][0]
    mirror = switch_branch(ev, symmetric_branch, -0.05, ContinuationConfig(E_max=30.0))
    q = mirror.points[-1]
    ref = [p for p in switched_branch.points if p.frame == q.frame and abs(p.E - q.E) < 1e-9]
    assert ref, "no matching point on the switched branch"
    v = ref[0].psi.values
    assert np.max(np.abs(q.psi.values - v[::-1])) < 1e-6 * np.max(np.abs(v))
