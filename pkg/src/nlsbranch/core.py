"""Grids, grid functions, quadrature and the finite-difference Laplacian.

Two frames are supported.  ``line`` discretizes [-L, L] with Dirichlet
values at both ends.  ``radial`` discretizes [0, L] for radially symmetric
functions in dimension ``n`` with an even reflection at r = 0 and a
Dirichlet value at r = L.

All operators are stored in symmetrized form ``S = M^{-1/2} K M^{-1/2}``
where ``K`` is the (symmetric) stiffness matrix and ``M`` the diagonal
matrix of quadrature weights, so that the Euclidean structure of ``S``
matches the weighted L2 structure of grid functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere in R^n (2 for n = 1)."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


@dataclass(frozen=True)
class Grid:
    frame: str
    L: float
    npoints: int
    n: int = 1

    def __post_init__(self):
        if self.frame not in ("line", "radial"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.npoints < 8:
            raise ValueError("npoints must be >= 8")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.frame == "line" and self.n != 1:
            raise ValueError("line frame is one dimensional")
        if self.n < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def h(self) -> float:
        if self.frame == "line":
            return 2.0 * self.L / (self.npoints - 1)
        return self.L / (self.npoints - 1)

    @property
    def x(self) -> np.ndarray:
        if self.frame == "line":
            # exact reflection symmetry of the nodes about 0
            i = np.arange(self.npoints)
            return self.L * (2.0 * i - (self.npoints - 1)) / (self.npoints - 1)
        return np.linspace(0.0, self.L, self.npoints)

    @property
    def interior(self) -> slice:
        """Slice of the nodes that carry unknowns."""
        if self.frame == "line":
            return slice(1, self.npoints - 1)
        return slice(0, self.npoints - 1)

    @property
    def nunknowns(self) -> int:
        return self.npoints - 2 if self.frame == "line" else self.npoints - 1

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights on all nodes.

        Line frame: trapezoidal rule.  Radial frame: exact measure
        c_n r^{n-1} dr of the dual cell around each node, which keeps the
        discrete quadratic form of the Laplacian consistent with the
        quadrature (summation by parts holds exactly).
        """
        h = self.h
        if self.frame == "line":
            w = np.full(self.npoints, h)
            w[0] = w[-1] = h / 2
            return w
        n = self.n
        r = self.x
        edges = np.concatenate(([0.0], 0.5 * (r[1:] + r[:-1]), [r[-1]]))
        return sphere_area(n) * (edges[1:] ** n - edges[:-1] ** n) / n

    def reflected(self, values: np.ndarray) -> np.ndarray:
        if self.frame != "line":
            raise ValueError("reflection is only defined in the line frame")
        return values[::-1]

    def with_points(self, npoints: int) -> "Grid":
        return Grid(self.frame, self.L, npoints, self.n)

    def with_L(self, L: float, keep_h: bool = True) -> "Grid":
        if not keep_h:
            return Grid(self.frame, L, self.npoints, self.n)
        cells = (self.npoints - 1) * L / self.L
        return Grid(self.frame, L, int(round(cells)) + 1, self.n)


@dataclass(frozen=True, eq=False)
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.npoints,):
            raise ValueError(
                f"field has {v.shape} values, grid has {self.grid.npoints} nodes")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.npoints))

    @classmethod
    def from_function(cls, grid: Grid, f) -> "Field":
        v = np.asarray(f(grid.x), dtype=float)
        v = v.copy()
        v[-1] = 0.0
        if grid.frame == "line":
            v[0] = 0.0
        return cls(grid, v)

    @classmethod
    def from_unknowns(cls, grid: Grid, u: np.ndarray) -> "Field":
        v = np.zeros(grid.npoints)
        v[grid.interior] = u
        return cls(grid, v)

    @property
    def unknowns(self) -> np.ndarray:
        return self.values[self.grid.interior]

    def _check(self, other: "Field"):
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values + other.values)
        return Field(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values - other.values)
        return Field(self.grid, self.values - other)

    def __mul__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, self.values * other.values)
        return Field(self.grid, self.values * other)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __truediv__(self, c):
        return Field(self.grid, self.values / c)


@dataclass(frozen=True)
class ProblemSpec:
    sigma: float
    p: float
    n: int = 1
    potential: object = None

    def __post_init__(self):
        if self.sigma == 0:
            raise ValueError("sigma must be nonzero")
        if not self.p > 0:
            raise ValueError("p must be positive")
        if self.n >= 3 and not self.p < 2.0 / (self.n - 2):
            raise ValueError(f"p must be below 2/(n-2) = {2.0 / (self.n - 2)}")


def inner(f: Field, g: Field) -> float:
    f._check(g)
    return float(np.dot(f.grid.weights, f.values * g.values))


def lp_norm(f: Field, q: float = 2.0) -> float:
    """L^q norm by quadrature on the grid; q = inf gives the max norm."""
    v = np.abs(f.values)
    if len(v) != f.grid.npoints:
        raise ValueError("values and grid disagree")
    if math.isinf(q):
        return float(v.max()) if len(v) else 0.0
    if q < 1:
        raise ValueError("q must be >= 1")
    s = float(np.dot(f.grid.weights, v ** q))
    return s ** (1.0 / q)


def forward_differences(f: Field) -> tuple[np.ndarray, np.ndarray]:
    """Differences (f[i+1]-f[i])/h and the face weights they are integrated with."""
    g = f.grid
    d = np.diff(f.values) / g.h
    if g.frame == "line":
        return d, np.full(len(d), g.h)
    r_face = 0.5 * (g.x[1:] + g.x[:-1])
    return d, sphere_area(g.n) * r_face ** (g.n - 1) * g.h


def h1_seminorm(f: Field) -> float:
    """Discrete L2 norm of the gradient.

    Uses the staggered difference whose square is exactly the quadratic form
    of :func:`laplacian_matrix`, i.e. ``h1_seminorm(f)**2 == <f, -Δ_h f>``.
    """
    d, w = forward_differences(f)
    return math.sqrt(float(np.dot(w, d * d)))


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Symmetric tridiagonal operator acting on the unknowns of a grid.

    ``diag``/``off`` hold the symmetrized matrix S; ``mass`` the quadrature
    weights of the unknown nodes.  The operator on nodal values is
    ``A = M^{-1/2} S M^{1/2}``.  ``threshold`` is the bottom of the
    essential spectrum this finite matrix approximates (None if unknown).
    """
    diag: np.ndarray
    off: np.ndarray
    mass: np.ndarray
    grid: Grid
    label: str = "custom"
    threshold: float | None = None
    sqrt_mass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sqrt_mass", np.sqrt(self.mass))
        if len(self.off) != len(self.diag) - 1 or len(self.mass) != len(self.diag):
            raise ValueError("inconsistent band lengths")

    @property
    def size(self) -> int:
        return len(self.diag)

    def plus_diagonal(self, c, label: str | None = None,
                      threshold: float | None = None) -> "OperatorMatrix":
        return OperatorMatrix(self.diag + c, self.off, self.mass, self.grid,
                              label or self.label,
                              self.threshold if threshold is None else threshold)

    def symmetric_dense(self) -> np.ndarray:
        S = np.diag(self.diag)
        S += np.diag(self.off, 1) + np.diag(self.off, -1)
        return S

    def dense(self) -> np.ndarray:
        """The operator on nodal values, A = M^{-1/2} S M^{1/2}."""
        s = self.sqrt_mass
        return self.symmetric_dense() / s[:, None] * s[None, :]

    def apply(self, u: np.ndarray) -> np.ndarray:
        """A u for a vector of unknowns."""
        y = self.sqrt_mass * u
        z = self.diag * y
        z[:-1] += self.off * y[1:]
        z[1:] += self.off * y[:-1]
        return z / self.sqrt_mass

    def banded(self, shift: float = 0.0) -> np.ndarray:
        """S - shift in LAPACK (1, 1) band storage."""
        ab = np.zeros((3, self.size))
        ab[0, 1:] = self.off
        ab[1] = self.diag - shift
        ab[2, :-1] = self.off
        return ab


def laplacian_matrix(grid: Grid) -> OperatorMatrix:
    """Second-order finite-difference -Δ with Dirichlet data at the outer edge."""
    h = grid.h
    m = grid.nunknowns
    if grid.frame == "line":
        return OperatorMatrix(np.full(m, 2.0 / h**2), np.full(m - 1, -1.0 / h**2),
                              np.full(m, h), grid, "laplacian", 0.0)
    # finite volume form of -(r^{n-1} v')' / r^{n-1}; v'(0) = 0 by the
    # reflection ghost node, which makes the first cell flux-free on the left
    n = grid.n
    r = grid.x
    faces = 0.5 * (r[1:] + r[:-1])
    flux = sphere_area(n) * faces ** (n - 1) / h
    K_diag = np.zeros(grid.npoints)
    K_diag[:-1] += flux
    K_diag[1:] += flux
    w = grid.weights
    mass = w[:m]
    diag = K_diag[:m] / mass
    off = -flux[: m - 1] / np.sqrt(mass[:-1] * mass[1:])
    return OperatorMatrix(diag, off, mass, grid, "laplacian", 0.0)
