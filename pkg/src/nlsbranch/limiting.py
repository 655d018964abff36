"""The translation-invariant limit problem -Δu + u + σ|u|^{2p}u = 0.

Computes its positive solution u_inf, rescales it to U_E, assembles
multi-bump templates and fits fields to shifted-profile decompositions.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .core import Field, Grid, ProblemSpec, laplacian_matrix, lp_norm
from .operators import ProjectedSolver, SingularOperatorError


class ResolutionError(ValueError):
    pass


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LimitingProfile:
    sigma: float
    p: float
    n: int
    u_inf: Field
    mass: float
    q_norm: float
    residual: float
    _spline: object = field(default=None, repr=False)

    @property
    def grid(self) -> Grid:
        return self.u_inf.grid

    @property
    def peak(self) -> float:
        return float(np.max(self.u_inf.values))

    def spline(self):
        """Cubic spline of u_inf in |x| (radial) or x (line)."""
        if self._spline is None:
            g = self.grid
            x, v = g.x, self.u_inf.values
            if g.frame == "radial":
                # even extension keeps the spline smooth at r = 0
                x = np.concatenate([-x[:0:-1], x])
                v = np.concatenate([v[:0:-1], v])
            object.__setattr__(self, "_spline", CubicSpline(x, v))
        return self._spline

    def __call__(self, x, nu: int = 0):
        """u_inf (or its nu-th derivative) at arbitrary points, zero outside the grid."""
        g = self.grid
        x = np.asarray(x, dtype=float)
        s = self.spline()
        lim = g.L
        out = np.zeros_like(x)
        inside = np.abs(x) <= lim
        out[inside] = s(x[inside], nu)
        return out

    def metadata(self) -> dict:
        return {"sigma": self.sigma, "p": self.p, "n": self.n, "frame": self.grid.frame,
                "L": self.grid.L, "npoints": self.grid.npoints, "peak": self.peak,
                "mass": self.mass, "q_norm": self.q_norm, "residual": self.residual}


def closed_form_uinf(p: float, sigma: float):
    """x -> ((p+1)/(-σ))^{1/(2p)} sech^{1/p}(p x), the 1D positive solution."""
    amp = ((p + 1) / (-sigma)) ** (1 / (2 * p))
    return lambda x: amp / np.cosh(p * np.asarray(x)) ** (1 / p)


def _limit_residual(u: np.ndarray, lap, p, sigma):
    return lap.apply(u) + u + sigma * np.abs(u) ** (2 * p) * u


def _weighted_norm(lap, r):
    return math.sqrt(float(np.dot(lap.mass, r * r)))


def _newton_limit(u, lap, p, sigma, constraints_fn, tol, max_iter=50):
    res = []
    for it in range(max_iter):
        F = _limit_residual(u, lap, p, sigma)
        nf = _weighted_norm(lap, F)
        nu = _weighted_norm(lap, u)
        res.append(nf)
        if nf < tol * max(nu, 1.0):
            return u, nf, res
        Jd = 1.0 + (2 * p + 1) * sigma * np.abs(u) ** (2 * p)
        J = lap.plus_diagonal(Jd, "Lplus")
        cons = constraints_fn(u) if constraints_fn else ()
        try:
            du = ProjectedSolver(J, cons).solve(-F)
        except SingularOperatorError as exc:
            raise RuntimeError(f"u_inf Newton: Jacobian singular, residual {nf:.3e}") from exc
        t = 1.0
        while t > 1e-4:
            cand = u + t * du
            if _weighted_norm(lap, _limit_residual(cand, lap, p, sigma)) < (1 - 1e-4 * t) * nf:
                break
            t *= 0.5
        else:
            # no decrease possible: accept if already at the rounding floor
            if nf < 1e-9 * max(nu, 1.0):
                return u, nf, res
        u = cand
    raise RuntimeError(f"u_inf Newton diverged, last residual {res[-1]:.3e}")


def _petviashvili(u, lap, p, sigma, iters=200):
    # stabilized fixed point for (1-Δ)u = -σ|u|^{2p}u; drives a bump to the positive solution
    ab = lap.banded(-1.0)
    from scipy.linalg import solve_banded
    g = (2 * p + 1) / (2 * p)
    for _ in range(iters):
        N = -sigma * np.abs(u) ** (2 * p) * u
        lhs = np.dot(lap.mass, u * (lap.apply(u) + u))
        rhs = np.dot(lap.mass, u * N)
        if rhs <= 0:
            raise RuntimeError("u_inf: stabilizing factor lost positivity")
        y = solve_banded((1, 1), ab, N * lap.sqrt_mass) / lap.sqrt_mass
        new = (lhs / rhs) ** g * y
        if np.max(np.abs(new - u)) < 1e-10 * np.max(np.abs(u)):
            return new
        u = new
    return u


def solve_uinfinity(problem: ProblemSpec | None = None, grid: Grid | None = None, *,
                    sigma: float | None = None, p: float | None = None, n: int | None = None,
                    tol: float = 1e-10) -> LimitingProfile:
    """Positive solution of -Δu + u + σ|u|^{2p}u = 0 (the potential is ignored)."""
    if problem is not None:
        sigma, p, n = problem.sigma, problem.p, problem.n
    n = 1 if n is None else n
    if sigma is None or p is None:
        raise ValueError("sigma and p are required")
    if not sigma < 0:
        raise ValueError("the limit problem needs a focusing nonlinearity (sigma < 0)")
    if n >= 3 and not p < 2 / (n - 2):
        raise ValueError("p must be below 2/(n-2)")
    if grid is None:
        grid = Grid("line", 30.0, 30001) if n == 1 else Grid("radial", 30.0, 3001, n)
    lap = laplacian_matrix(grid)
    x = grid.x[grid.interior]
    if grid.frame == "line":
        u0 = closed_form_uinf(p, sigma)(x)
        # translation mode: keep the correction orthogonal to u'
        def cons(u):
            du = np.gradient(u, grid.h)
            return [Field.from_unknowns(grid, du)]
        u, nf, _ = _newton_limit(u0, lap, p, sigma, cons, tol)
    else:
        u0 = np.exp(-x * x / 2.0)
        u0 = _petviashvili(u0, lap, p, sigma)
        u, nf, _ = _newton_limit(u0, lap, p, sigma, None, tol)
    if np.any(u <= 0):
        raise RuntimeError("u_inf is not positive")
    f = Field.from_unknowns(grid, u)
    return LimitingProfile(sigma, p, n, f, lp_norm(f, 2) ** 2,
                           lp_norm(f, 2 * p + 2) ** (2 * p + 2), nf / lp_norm(f, 2))


def limit_residual(profile: LimitingProfile) -> float:
    """||-Δu + u + σ|u|^{2p}u|| / ||u||."""
    lap = laplacian_matrix(profile.grid)
    r = _limit_residual(profile.u_inf.unknowns, lap, profile.p, profile.sigma)
    return _weighted_norm(lap, r) / lp_norm(profile.u_inf)


def scale_profile(profile: LimitingProfile, E: float, grid: Grid | None = None) -> Field:
    """U_E(x) = E^{1/(2p)} u_inf(sqrt(E) x) sampled on ``grid``."""
    if not E > 0:
        raise ValueError("E must be positive")
    grid = grid or profile.grid
    if grid.h * math.sqrt(E) > 0.25:
        raise ResolutionError(
            f"grid spacing {grid.h:g} cannot resolve width 1/sqrt(E) = {1 / math.sqrt(E):.3g}")
    vals = E ** (1 / (2 * profile.p)) * profile(math.sqrt(E) * grid.x)
    return Field.from_function(grid, lambda x: vals)


def unscale(field_: Field, profile_p: float, E: float, grid: Grid) -> Field:
    """Inverse of scale_profile: f -> E^{-1/(2p)} f(x/sqrt(E)) on ``grid``."""
    g = field_.grid
    s = CubicSpline(g.x, field_.values)
    y = grid.x / math.sqrt(E)
    v = np.where(np.abs(y) <= g.L, s(np.clip(y, g.x[0], g.x[-1])), 0.0)
    return Field.from_function(grid, lambda x: E ** (-1 / (2 * profile_p)) * v)


@dataclass(frozen=True)
class ProfileTemplate:
    centers: tuple
    signs: tuple
    E: float

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))
        signs = tuple(int(s) for s in self.signs) if self.signs else (1,) * len(self.centers)
        object.__setattr__(self, "signs", signs)
        if len(self.signs) != len(self.centers):
            raise ValueError("one sign per center")
        if any(s not in (1, -1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("centers must be distinct")

    @property
    def m(self) -> int:
        return len(self.centers)

    def min_separation(self) -> float:
        c = sorted(self.centers)
        return min((b - a for a, b in zip(c, c[1:])), default=math.inf)

    def to_dict(self):
        return {"centers": list(self.centers), "signs": list(self.signs), "E": self.E}


def build_template(t: ProfileTemplate, profile: LimitingProfile, grid: Grid,
                   frame: str = "renormalized") -> Field:
    """Sum of signed profiles at the template centers.

    Renormalized frame: sum mu_i u_inf(x - x_i sqrt(E)).
    Physical frame: sum mu_i U_E(x - x_i).
    """
    rE = math.sqrt(t.E)
    if rE * t.min_separation() <= 6:
        warnings.warn("template profiles overlap (separation below 6 decay lengths)",
                      RuntimeWarning)
    x = grid.x
    v = np.zeros_like(x)
    for c, mu in zip(t.centers, t.signs):
        if frame == "renormalized":
            v += mu * profile(x - c * rE)
        elif frame == "physical":
            v += mu * t.E ** (1 / (2 * profile.p)) * profile(rE * (x - c))
        else:
            raise ValueError(f"unknown frame {frame!r}")
    return Field.from_function(grid, lambda _: v)


@dataclass(eq=False)
class ProfileFit:
    shifts: np.ndarray
    centers: np.ndarray
    amplitudes: np.ndarray
    remainder: Field
    remainder_norm: float
    orthogonality: float
    iterations: int
    history: list


class _Shifted:
    """A profile given as a field or callable, evaluable with shifts."""

    def __init__(self, prof):
        if isinstance(prof, LimitingProfile):
            self.f = prof
        elif isinstance(prof, Field):
            s = CubicSpline(prof.grid.x, prof.values)
            lo, hi = prof.grid.x[0], prof.grid.x[-1]

            def f(x, nu=0):
                x = np.asarray(x, float)
                out = np.zeros_like(x)
                m = (x >= lo) & (x <= hi)
                out[m] = s(x[m], nu)
                return out
            self.f = f
        else:
            self.f = prof

    def __call__(self, x, nu=0):
        return self.f(x, nu)


def profile_fit(u: Field, profiles, centers, kernel_modes=(), base: Field | None = None,
                eps: float | None = None, tol: float = 1e-12, max_iter: int = 30) -> ProfileFit:
    """Decompose u = base + sum_j u_j(x - y_j - s_j) + sum_i a_i phi_i + v.

    v is orthogonal to every shifted derivative u_j'(x - y_j - s_j) and to
    every phi_i.  Newton on (s, a); line frame only.
    """
    g = u.grid
    if g.frame != "line":
        raise ValueError("profile_fit works in the line frame")
    profs = [_Shifted(p) for p in profiles]
    y = np.asarray(centers, dtype=float)
    m = len(profs)
    if len(y) != m:
        raise ValueError("one center guess per profile")
    modes = list(kernel_modes)
    d = len(modes)
    w = g.weights
    x = g.x
    base_v = base.values if base is not None else np.zeros(g.npoints)
    Phi = np.array([f.values for f in modes]).reshape(d, g.npoints)

    def parts(s):
        U = np.array([pr(x - y[j] - s[j]) for j, pr in enumerate(profs)])
        D = np.array([pr(x - y[j] - s[j], 1) for j, pr in enumerate(profs)])
        D2 = np.array([pr(x - y[j] - s[j], 2) for j, pr in enumerate(profs)])
        return U, D, D2

    s = np.zeros(m)
    a = np.zeros(d)
    U, D, D2 = parts(s)
    r0 = u.values - base_v - U.sum(axis=0)
    norms = [math.sqrt(np.dot(w, Uj * Uj)) for Uj in U]
    if eps is None:
        eps = 0.3 * min(norms) if norms else math.inf
    if math.sqrt(np.dot(w, r0 * r0)) >= eps:
        raise DecompositionError("initial remainder too large for the decomposition")
    dn = np.array([np.dot(w, Dj * Dj) for Dj in D])
    history = []
    for it in range(max_iter + 1):
        U, D, D2 = parts(s)
        v = u.values - base_v - U.sum(axis=0) - (a @ Phi if d else 0.0)
        F = np.concatenate([[np.dot(w, D[j] * v) / dn[j] for j in range(m)],
                            [np.dot(w, Phi[r] * v) for r in range(d)]])
        nf = float(np.max(np.abs(F))) if len(F) else 0.0
        history.append(nf)
        if nf < tol:
            break
        if it == max_iter:
            raise DecompositionError(f"profile_fit did not converge: {history}")
        J = np.zeros((m + d, m + d))
        for j in range(m):
            for k in range(m):
                J[j, k] = np.dot(w, D[j] * D[k]) / dn[j]
            J[j, j] -= np.dot(w, D2[j] * v) / dn[j]
            for i in range(d):
                J[j, m + i] = -np.dot(w, D[j] * Phi[i]) / dn[j]
        for r in range(d):
            for k in range(m):
                J[m + r, k] = np.dot(w, Phi[r] * D[k])
            for i in range(d):
                J[m + r, m + i] = -np.dot(w, Phi[r] * Phi[i])
        if np.linalg.cond(J) > 1e12:
            raise DecompositionError("decomposition degenerate")
        step = np.linalg.solve(J, -F)
        s = s + step[:m]
        a = a + step[m:]
    rem = Field(g, v)
    orth = 0.0
    for j in range(m):
        orth = max(orth, abs(np.dot(w, D[j] * v)) / math.sqrt(dn[j]))
    for r in range(d):
        orth = max(orth, abs(np.dot(w, Phi[r] * v)) / math.sqrt(np.dot(w, Phi[r] ** 2)))
    return ProfileFit(s, y + s, a, rem, lp_norm(rem), orth, it, history)


def log_derivative_ratio(profile: LimitingProfile, rel_floor: float = 1e-10) -> float:
    """max |u'/u| over the nodes where u exceeds rel_floor * max u."""
    return float(np.max(np.abs(log_derivative(profile, rel_floor)[1])))


def log_derivative(profile: LimitingProfile, rel_floor: float = 1e-10):
    g = profile.grid
    u = profile.u_inf.values
    keep = u > rel_floor * u.max()
    lu = np.full_like(u, np.nan)
    lu[keep] = np.log(u[keep])
    if g.frame == "radial":
        ext = np.concatenate([[lu[1]], lu])
        d = (ext[2:] - ext[:-2]) / (2 * g.h)
        d = np.concatenate([d, [np.nan]])
    else:
        d = np.full_like(u, np.nan)
        d[1:-1] = (lu[2:] - lu[:-2]) / (2 * g.h)
    ok = np.isfinite(d)
    return g.x[ok], d[ok]


def tail_slope(x: np.ndarray, u: np.ndarray, lo: float, hi: float, n: int = 1) -> float:
    """Least-squares slope of log(r^{(n-1)/2}|u|) on [lo, hi]."""
    m = (x >= lo) & (x <= hi) & (np.abs(u) > 0)
    if m.sum() < 3:
        raise ValueError("tail window holds no resolvable values")
    yy = np.log(np.abs(u[m])) + 0.5 * (n - 1) * np.log(np.abs(x[m]))
    return float(np.polyfit(x[m], yy, 1)[0])


def decay_rate(profile: LimitingProfile) -> float:
    g = profile.grid
    return tail_slope(np.abs(g.x), profile.u_inf.values, g.L / 2, 3 * g.L / 4, profile.n)


def export_profile_csv(profile: LimitingProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "u_inf"])
        for xi, ui in zip(profile.grid.x, profile.u_inf.values):
            wr.writerow([repr(float(xi)), repr(float(ui))])


def export_profile_json(profile: LimitingProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile.metadata(), fh, indent=2, sort_keys=True)
