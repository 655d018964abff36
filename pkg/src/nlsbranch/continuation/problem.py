"""Discrete nonlinear map F(ψ, E) in the physical and renormalized frames.

Physical frame:      F(ψ, E) = -Δψ + Vψ + Eψ + σ|ψ|^{2p}ψ.
Renormalized frame:  F(u, E) = -Δu + W_E u + u + σ|u|^{2p}u,
with W_E(y) = V(y/√E)/E and ψ(x) = E^{1/(2p)} u(√E x).

Scalar functionals are always reported in physical units.
"""
from __future__ import annotations

import functools
import math

import numpy as np
from scipy.interpolate import CubicSpline

from ..core import Field, Grid, ProblemSpec, h1_seminorm, laplacian_matrix, lp_norm
from ..potential import potential_values

PHYSICAL = "physical"
RENORMALIZED = "renormalized"


@functools.lru_cache(maxsize=64)
def _lap(grid: Grid):
    return laplacian_matrix(grid)


@functools.lru_cache(maxsize=64)
def _potential_on(spec, grid: Grid, order: int = 0):
    v = potential_values(spec, grid.x, order)
    v.setflags(write=False)
    return v


class Discretization:
    """A problem together with the grid and frame its unknowns live in."""

    def __init__(self, problem: ProblemSpec, grid: Grid, frame: str = PHYSICAL):
        if frame not in (PHYSICAL, RENORMALIZED):
            raise ValueError(f"unknown frame {frame!r}")
        if grid.frame == "radial" and grid.n != problem.n:
            raise ValueError("grid dimension differs from the problem dimension")
        self.problem = problem
        self.grid = grid
        self.frame = frame
        self.lap = _lap(grid)

    def __repr__(self):
        return f"Discretization({self.frame}, L={self.grid.L}, npoints={self.grid.npoints})"

    @property
    def sigma(self):
        return self.problem.sigma

    @property
    def p(self):
        return self.problem.p

    @property
    def n(self):
        return self.problem.n

    # potential terms -----------------------------------------------------
    def potential(self, E: float) -> np.ndarray:
        """The multiplication term W on all nodes (V, or V(x/√E)/E)."""
        spec = self.problem.potential
        if self.frame == PHYSICAL:
            return _potential_on(spec, self.grid)
        return potential_values(spec, self.grid.x / math.sqrt(E)) / E

    def potential_dE(self, E: float) -> np.ndarray:
        """∂W/∂E on all nodes."""
        if self.frame == PHYSICAL:
            return np.zeros(self.grid.npoints)
        spec = self.problem.potential
        y = self.grid.x / math.sqrt(E)
        return -potential_values(spec, y) / E**2 - 0.5 * y * potential_values(spec, y, 1) / E**2

    def linear_shift(self, E: float) -> float:
        return E if self.frame == PHYSICAL else 1.0

    def threshold(self, E: float) -> float:
        """Bottom of the continuous spectrum of L± in this frame."""
        return self.linear_shift(E)

    def eig_scale(self, E: float) -> float:
        """Factor converting eigenvalues of this frame into physical units."""
        return 1.0 if self.frame == PHYSICAL else E

    # operators -------------------------------------------------------------
    def residual_unknowns(self, u: np.ndarray, E: float, W: np.ndarray | None = None) -> np.ndarray:
        if W is None:
            W = self.potential(E)
        W = W[self.grid.interior]
        s, p = self.sigma, self.p
        return self.lap.apply(u) + (W + self.linear_shift(E)) * u + s * np.abs(u) ** (2 * p) * u

    def dF_dE(self, u: np.ndarray, E: float) -> np.ndarray:
        if self.frame == PHYSICAL:
            return u.copy()
        return self.potential_dE(E)[self.grid.interior] * u

    def lplus(self, u: np.ndarray, E: float, W: np.ndarray | None = None):
        if W is None:
            W = self.potential(E)
        c = (W[self.grid.interior] + self.linear_shift(E)
             + (2 * self.p + 1) * self.sigma * np.abs(u) ** (2 * self.p))
        return self.lap.plus_diagonal(c, "Lplus", self.threshold(E))

    def lminus(self, u: np.ndarray, E: float, W: np.ndarray | None = None):
        if W is None:
            W = self.potential(E)
        c = (W[self.grid.interior] + self.linear_shift(E)
             + self.sigma * np.abs(u) ** (2 * self.p))
        return self.lap.plus_diagonal(c, "Lminus", self.threshold(E))

    def tol_zero(self, E: float) -> float:
        """Zero tolerance for eigenvalues in this frame's units (1e-6 max(1,E) physical)."""
        return 1e-6 * max(1.0, E) / self.eig_scale(E)

    def norm(self, u: np.ndarray) -> float:
        return math.sqrt(float(np.dot(self.lap.mass, u * u)))

    def dot(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.lap.mass, a * b))

    def residual_scale(self, E: float) -> float:
        # the discrete Laplacian amplifies rounding by ~1/h^2; allowing for
        # E in the physical frame keeps the criterion attainable at large E
        return max(1.0, E) if self.frame == PHYSICAL else 1.0

    # functionals -------------------------------------------------------------
    def functionals(self, psi: Field, E: float) -> dict:
        """N, Q, gradient term G, potential term and energy in physical units."""
        p, s, n = self.p, self.sigma, self.n
        N = lp_norm(psi, 2) ** 2
        Q = lp_norm(psi, 2 * p + 2) ** (2 * p + 2)
        G = h1_seminorm(psi) ** 2
        w = self.grid.weights
        Vt = float(np.dot(w, self.potential(E) * psi.values ** 2))
        if self.frame == RENORMALIZED:
            a = E ** (1 / p - n / 2)
            N, Q, G, Vt = a * N, a * E * Q, a * E * G, a * E * Vt
        energy = G + Vt + s / (p + 1) * Q
        return {"N": N, "Q": Q, "G": G, "Vterm": Vt, "energy": energy}

    def pohozaev_terms(self, psi: Field, E: float) -> dict:
        """Terms of (n-2)G + ∫(nV + x·∇V)ψ² + nσQ/(p+1) + nEN = 0, physical units."""
        spec = self.problem.potential
        if spec is not None and not spec.has_derivatives:
            raise ValueError("no derivative available for a tabulated potential")
        p, s, n = self.p, self.sigma, self.n
        f = self.functionals(psi, E)
        x = self.grid.x
        w = self.grid.weights
        if self.frame == PHYSICAL:
            xv = potential_values(spec, x)
            xd = x * potential_values(spec, x, 1)
            vx = float(np.dot(w, (n * xv + xd) * psi.values ** 2))
        else:
            y = x / math.sqrt(E)
            xv = potential_values(spec, y)
            xd = y * potential_values(spec, y, 1)
            vx = E ** (1 / p - n / 2) * float(np.dot(w, (n * xv + xd) * psi.values ** 2))
        return {"gradient": (n - 2) * f["G"], "potential": vx,
                "nonlinear": n * s * f["Q"] / (p + 1), "mass": n * E * f["N"]}

    # frame conversion -----------------------------------------------------------
    def to_physical_values(self, u: Field, E: float, grid: Grid) -> Field:
        return convert(u, E, self.p, RENORMALIZED, PHYSICAL, grid)


def convert(f: Field, E: float, p: float, src: str, dst: str, grid: Grid) -> Field:
    """Resample a field between frames with ψ(x) = E^{1/(2p)} u(√E x)."""
    if src == dst and f.grid == grid:
        return f
    g = f.grid
    if g.frame == "radial":
        xs = np.concatenate([-g.x[:0:-1], g.x])
        vs = np.concatenate([f.values[:0:-1], f.values])
    else:
        xs, vs = g.x, f.values
    spline = CubicSpline(xs, vs)
    if src == dst:
        y, amp = grid.x, 1.0
    elif src == RENORMALIZED:
        y, amp = grid.x * math.sqrt(E), E ** (1 / (2 * p))
    else:
        y, amp = grid.x / math.sqrt(E), E ** (-1 / (2 * p))
    inside = (y >= xs[0]) & (y <= xs[-1])
    v = np.zeros(grid.npoints)
    v[inside] = amp * spline(y[inside])
    return Field.from_function(grid, lambda _: v)


def residual(problem: ProblemSpec, psi: Field, E: float, frame: str = PHYSICAL) -> Field:
    """Nodal values of F(ψ, E); zero on the Dirichlet nodes."""
    d = Discretization(problem, psi.grid, frame)
    return Field.from_unknowns(psi.grid, d.residual_unknowns(psi.unknowns, E))


def nonlinear_remainder(problem: ProblemSpec, U: Field, v: Field) -> Field:
    """σ|U+v|^{2p}(U+v) - σ|U|^{2p}U - σ(2p+1)|U|^{2p}v."""
    U._check(v)
    s, p = problem.sigma, problem.p
    a, b = U.values, v.values
    w = a + b
    out = s * (np.abs(w) ** (2 * p) * w - np.abs(a) ** (2 * p) * a
               - (2 * p + 1) * np.abs(a) ** (2 * p) * b)
    return Field(U.grid, out)
