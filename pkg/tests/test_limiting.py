import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlsbranch.core import Field, Grid, lp_norm
from nlsbranch.limiting import (DecompositionError, ProfileTemplate, ResolutionError, build_template,
                                closed_form_uinf, decay_rate, limit_residual,
                                log_derivative, log_derivative_ratio, profile_fit,
                                scale_profile, solve_uinfinity, unscale)

FIT = Grid("line", 30.0, 6001)


@pytest.fixture(scope="module")
def uinf2():
    return solve_uinfinity(sigma=-1.0, p=2.0, n=1)


def test_cubic_profile(uinf1):
    assert abs(uinf1.peak - math.sqrt(2)) < 1e-6
    assert abs(uinf1.mass - 4.0) < 1e-5
    assert abs(uinf1.q_norm - 16 / 3) < 1e-4
    assert uinf1.residual < 1e-8
    assert np.all(uinf1.u_inf.unknowns > 0)


def test_closed_form_substitution():
    # residual of the closed form under an independent finite-difference check
    x = np.linspace(-10, 10, 20001)
    h = x[1] - x[0]
    for p in (1.0, 2.0):
        u = closed_form_uinf(p, -1.0)(x)
        r = -(u[2:] - 2 * u[1:-1] + u[:-2]) / h**2 + u[1:-1] - u[1:-1] ** (2 * p + 1)
        assert np.max(np.abs(r)) < 1e-5


def test_quintic_profile(uinf2):
    x = uinf2.grid.x
    ref = 3 ** 0.25 / np.sqrt(np.cosh(2 * x))
    assert uinf2.residual < 1e-8
    assert limit_residual(uinf2) < 1e-8
    assert np.max(np.abs(uinf2.u_inf.values - ref)) < 1e-5


def test_profile_monotone(uinf1):
    v = uinf1.u_inf.values
    x = uinf1.grid.x
    right = v[x >= 0]
    assert np.all(np.diff(right) <= 0)


def test_peak_second_order():
    errs = [solve_uinfinity(sigma=-1.0, p=1.0, n=1, grid=Grid("line", 30.0, N)).peak
            - math.sqrt(2) for N in (3001, 6001, 12001)]
    for a, b in zip(errs, errs[1:]):
        assert 3.5 < a / b < 4.5


@pytest.mark.parametrize("n,peak,mass", [(2, 2.2062, 11.70), (3, 4.3373, None)])
def test_radial_profiles(n, peak, mass):
    # reference peak values and the 2D critical mass are the standard ground-state constants
    P = solve_uinfinity(sigma=-1.0, p=1.0, n=n)
    assert P.residual < 1e-8
    assert abs(P.peak - peak) < 2e-3
    if mass is not None:
        assert abs(P.mass - mass) < 1e-2
    assert np.all(np.diff(P.u_inf.values) <= 0)
    assert -1.03 <= decay_rate(P) <= -0.97


def test_limit_errors():
    with pytest.raises(ValueError):
        solve_uinfinity(sigma=1.0, p=1.0, n=1)
    with pytest.raises(ValueError):
        solve_uinfinity(sigma=-1.0, p=2.5, n=3)


def test_decay_slope(uinf1, uinf2):
    assert -1.03 <= decay_rate(uinf1) <= -0.97
    assert -1.03 <= decay_rate(uinf2) <= -0.97


def test_scale_identity(uinf1):
    f = scale_profile(uinf1, 1.0)
    assert np.max(np.abs(f.values - uinf1.u_inf.values)) < 1e-12


def test_scale_peak_and_width(uinf1):
    f = scale_profile(uinf1, 4.0)
    assert abs(f.values.max() - 2 * math.sqrt(2)) < 1e-4
    x = uinf1.grid.x

    def halfwidth(v):
        return x[(v >= v.max() / 2) & (x >= 0)].max()
    assert abs(halfwidth(f.values) - halfwidth(uinf1.u_inf.values) / 2) < 2 * uinf1.grid.h


def test_scale_mass(uinf1):
    f = scale_profile(uinf1, 9.0)
    assert abs(lp_norm(f) ** 2 - 12.0) < 1e-3


def test_scale_refuses_coarse_grid(uinf1):
    with pytest.raises(ResolutionError):
        scale_profile(uinf1, 100.0, Grid("line", 30.0, 601))
    with pytest.raises(ValueError):
        scale_profile(uinf1, -1.0)


def test_scale_roundtrip(uinf1):
    f = scale_profile(uinf1, 4.0, FIT)
    back = unscale(f, 1.0, 4.0, FIT)
    ref = uinf1(FIT.x)
    assert np.max(np.abs(back.values - ref)) < 1e-6


def test_template_single(uinf1):
    t = ProfileTemplate([0.0], [1], 25.0)
    f = build_template(t, uinf1, uinf1.grid)
    assert np.max(np.abs(f.values - uinf1.u_inf.values)) < 1e-12


def test_template_two_bumps(uinf1):
    g = Grid("line", 80.0, 16001)
    t = ProfileTemplate([-4.0, 4.0], [1, 1], 25.0)
    f = build_template(t, uinf1, g)
    assert abs(lp_norm(f) ** 2 - 2 * uinf1.mass) < 1e-4
    peaks = g.x[np.argsort(f.values)[-2:]]
    assert np.allclose(sorted(peaks), [-20.0, 20.0], atol=g.h)


def test_template_antisymmetric(uinf1):
    g = Grid("line", 80.0, 16001)
    f = build_template(ProfileTemplate([-4.0, 4.0], [1, -1], 25.0), uinf1, g)
    assert np.max(np.abs(f.values + f.values[::-1])) < 1e-12


def test_template_physical(uinf1):
    t = ProfileTemplate([-4.0, 4.0], [1, 1], 25.0)
    f = build_template(t, uinf1, FIT, frame="physical")
    assert abs(lp_norm(f) ** 2 - 2 * 5 * uinf1.mass) < 1e-3


def test_template_validation(uinf1):
    with pytest.raises(ValueError):
        ProfileTemplate([1.0, 1.0], [1, 1], 1.0)
    with pytest.raises(ValueError):
        ProfileTemplate([1.0], [2], 1.0)
    with pytest.warns(RuntimeWarning):
        build_template(ProfileTemplate([-0.5, 0.5], [1, 1], 4.0), uinf1, FIT)


def _shifted(uinf, c):
    return Field.from_function(FIT, lambda x: uinf(x - c))


def test_fit_exact(uinf1):
    fit = profile_fit(_shifted(uinf1, 1.0), [uinf1], [1.0])
    assert abs(fit.shifts[0]) < 1e-12
    assert fit.remainder_norm < 1e-12


def test_fit_planted_shift(uinf1):
    fit = profile_fit(_shifted(uinf1, 1.1), [uinf1], [1.0])
    assert abs(fit.shifts[0] - 0.1) < 1e-8
    assert fit.remainder_norm < 1e-8
    assert fit.orthogonality < 1e-10


def test_fit_two_profiles_with_mode(uinf1):
    u = Field.from_function(FIT, lambda x: uinf1(x + 8.05) - uinf1(x - 7.97))
    mode = Field.from_function(FIT, lambda x: np.exp(-x * x))
    fit = profile_fit(u, [uinf1, lambda x, nu=0: -uinf1(x, nu)], [-8.0, 8.0], [mode])
    assert np.allclose(fit.centers, [-8.05, 7.97], atol=1e-6)
    assert fit.orthogonality < 1e-10


def test_fit_errors(uinf1):
    with pytest.raises(DecompositionError):
        profile_fit(_shifted(uinf1, 5.0), [uinf1], [0.0])
    with pytest.raises(ValueError):
        profile_fit(_shifted(uinf1, 0.0), [uinf1], [0.0, 1.0])


def _bump_noise(rng, uinf, y):
    # smooth random field orthogonal to the translation mode at y
    w = FIT.weights
    x = FIT.x
    r = sum(rng.normal() * np.exp(-(x - c) ** 2) for c in rng.uniform(-5, 5, 8))
    d = uinf(x - y, 1)
    r = r - np.dot(w, r * d) / np.dot(w, d * d) * d
    return r / math.sqrt(np.dot(w, r * r))


def test_fit_perturbation_scaling(uinf1, rng):
    y = 0.5
    r = _bump_noise(rng, uinf1, y)
    base = uinf1(FIT.x - y)
    out = []
    for eps in (1e-2, 1e-3):
        fit = profile_fit(Field(FIT, base + eps * r), [uinf1], [y])
        assert abs(fit.shifts[0]) < 1e-3
        assert abs(fit.remainder_norm - eps) < 0.1 * eps
        out.append(abs(fit.shifts[0]))
    assert out[1] <= out[0] / 10


@settings(max_examples=15, deadline=None)
@given(st.integers(-200, 200))
def test_fit_equivariance(uinf1, k):
    y = 0.3
    u0 = Field.from_function(FIT, lambda x: uinf1(x - y - 0.05))
    uk = Field.from_function(FIT, lambda x: uinf1(x - y - 0.05 - k * FIT.h))
    c0 = profile_fit(u0, [uinf1], [y]).centers[0]
    ck = profile_fit(uk, [uinf1], [y + k * FIT.h]).centers[0]
    assert abs(ck - c0 - k * FIT.h) < 1e-8


def test_log_derivative(uinf1, uinf2):
    assert abs(log_derivative_ratio(uinf1) - 1.0) < 1e-3
    assert abs(log_derivative_ratio(uinf2) - 1.0) < 1e-2
    x, d = log_derivative(uinf1)
    assert abs(d[np.argmin(np.abs(x))]) < 1e-6
