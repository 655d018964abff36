"""Potential families, their critical points and the linear ground state."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .core import Field, Grid


class HypothesisViolation(ValueError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    """V as a sum of wells.

    family ``poschl_teller``: wells (depth, center) give -depth*sech^2(x-center).
    family ``gaussian``: wells (depth, center, width) give -depth*exp(-((x-c)/w)^2).
    family ``tabulated``: samples (x, V) interpolated by a cubic spline.
    In the radial frame x is the radius.
    """
    family: str = "poschl_teller"
    wells: tuple = ()
    samples: tuple | None = None
    symmetry_hint: str | None = None

    def __post_init__(self):
        if self.family not in ("poschl_teller", "gaussian", "tabulated"):
            raise ValueError(f"unknown potential family {self.family!r}")
        object.__setattr__(self, "wells", tuple(tuple(float(c) for c in w) for w in self.wells))
        if self.family == "poschl_teller" and any(len(w) != 2 for w in self.wells):
            raise ValueError("poschl_teller wells are (depth, center)")
        if self.family == "poschl_teller" and any(w[0] <= 0 for w in self.wells):
            raise ValueError("well depth must be positive")
        if self.family == "gaussian" and any(len(w) != 3 or w[2] <= 0 for w in self.wells):
            raise ValueError("gaussian wells are (depth, center, width>0)")
        if self.family == "tabulated":
            if self.samples is None or len(self.samples) != 2:
                raise ValueError("tabulated potential needs samples (x, V)")
            xs, vs = (np.asarray(a, float) for a in self.samples)
            if xs.shape != vs.shape or len(xs) < 4 or np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated samples must be increasing x with matching V")

    @property
    def has_derivatives(self) -> bool:
        return self.family != "tabulated"

    def is_reflection_symmetric(self, tol: float = 1e-12) -> bool:
        """True when V(-x) = V(x) for the closed-form families."""
        if self.symmetry_hint == "reflection":
            return True
        if self.family == "tabulated":
            return False
        key = lambda w: tuple(w[i] for i in range(len(w)) if i != 1)
        mine = sorted((key(w), w[1]) for w in self.wells)
        mirrored = sorted((key(w), -w[1]) for w in self.wells)
        return all(a[0] == b[0] and abs(a[1] - b[1]) <= tol for a, b in zip(mine, mirrored))

    def to_dict(self):
        d = {"family": self.family, "wells": [list(w) for w in self.wells]}
        if self.samples is not None:
            d["samples"] = [list(map(float, a)) for a in self.samples]
        if self.symmetry_hint:
            d["symmetry_hint"] = self.symmetry_hint
        return d

    @classmethod
    def from_dict(cls, d):
        samples = d.get("samples")
        return cls(d.get("family", "poschl_teller"), tuple(tuple(w) for w in d.get("wells", [])),
                   tuple(tuple(a) for a in samples) if samples is not None else None,
                   d.get("symmetry_hint"))


def poschl_teller_wells(wells) -> PotentialSpec:
    return PotentialSpec("poschl_teller", tuple(wells))


def gaussian_wells(wells) -> PotentialSpec:
    return PotentialSpec("gaussian", tuple(wells))


def tabulated(x, V) -> PotentialSpec:
    return PotentialSpec("tabulated", samples=(tuple(x), tuple(V)))


def potential_values(spec: PotentialSpec | None, x: np.ndarray, order: int = 0) -> np.ndarray:
    """V, V' or V'' at arbitrary coordinates."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    if spec is None:
        return out
    if spec.family == "tabulated":
        xs, vs = (np.asarray(a, float) for a in spec.samples)
        if order > 0:
            raise ValueError("no derivative available for a tabulated potential")
        if x.min() < xs[0] - 1e-12 or x.max() > xs[-1] + 1e-12:
            raise ValueError("tabulated potential does not cover the grid")
        return CubicSpline(xs, vs)(x)
    for w in spec.wells:
        if spec.family == "poschl_teller":
            d, c = w
            s = 1.0 / np.cosh(x - c)
            t = np.tanh(x - c)
            if order == 0:
                out -= d * s * s
            elif order == 1:
                out += 2 * d * s * s * t
            else:
                out += 2 * d * s * s * (1 - 3 * t * t)
        else:
            d, c, wd = w
            z = (x - c) / wd
            g = np.exp(-z * z)
            if order == 0:
                out -= d * g
            elif order == 1:
                out += 2 * d * z * g / wd
            else:
                out += 2 * d * (1 - 2 * z * z) * g / wd**2
    return out


def evaluate(spec: PotentialSpec | None, grid: Grid) -> Field:
    v = potential_values(spec, grid.x)
    edge = abs(v[-1]) if grid.frame == "radial" else max(abs(v[0]), abs(v[-1]))
    if edge > 1e-8:
        warnings.warn(f"potential is {edge:.2e} at the grid edge; enlarge L", RuntimeWarning)
    return Field(grid, v)


def derivatives(spec: PotentialSpec | None, grid: Grid) -> tuple[Field, Field]:
    """(V', V'') on the grid for the closed-form families."""
    return (Field(grid, potential_values(spec, grid.x, 1)),
            Field(grid, potential_values(spec, grid.x, 2)))


@dataclass(frozen=True)
class CriticalPoint:
    location: float
    kind: str
    hessian_eigs: tuple
    n_i: int

    def to_dict(self):
        return {"location": self.location, "kind": self.kind,
                "hessian_eigs": list(self.hessian_eigs), "n_i": self.n_i}


def critical_points(spec: PotentialSpec | None, grid: Grid, samples_per_h: int = 1) -> list[CriticalPoint]:
    """Critical points of V inside the grid, sorted by location.

    Sign changes of V' on the nodes are refined by Brent's method; V'' is
    taken from the closed form.  Points with |V''| below 1e-8 max|V''| are
    returned with kind ``degenerate``.
    """
    if spec is None or not spec.wells:
        return []
    if not spec.has_derivatives:
        raise ValueError("no derivative available for a tabulated potential")
    x = np.linspace(grid.x[0], grid.x[-1], samples_per_h * (grid.npoints - 1) + 1)
    d1 = potential_values(spec, x, 1)
    d2 = potential_values(spec, x, 2)
    tol_grad = 1e-10 * np.max(np.abs(d1))
    tol_hess = 1e-8 * np.max(np.abs(d2))
    f = lambda t: float(potential_values(spec, np.array([t]), 1)[0])
    roots = []
    for i in range(len(x) - 1):
        a, b = d1[i], d1[i + 1]
        if a == 0.0:
            roots.append(x[i])
        elif a * b < 0:
            roots.append(brentq(f, x[i], x[i + 1], xtol=1e-13, rtol=1e-15))
    if grid.frame == "radial":
        # r = 0 is always critical for a radial function
        roots = [0.0] + [r for r in roots if r > 0]
    out = []
    for r in roots:
        if abs(f(r)) > max(tol_grad, 1e-12) * 10:
            continue
        h2 = float(potential_values(spec, np.array([r]), 2)[0])
        if grid.frame == "radial" and grid.n > 1:
            if r > 0:
                # a sphere of critical points: tangential directions are flat
                eigs = (h2,) + (0.0,) * (grid.n - 1)
                out.append(CriticalPoint(float(r), "degenerate", eigs, 0))
                continue
            eigs = (h2,) * grid.n
        else:
            eigs = (h2,)
        if abs(h2) < tol_hess:
            out.append(CriticalPoint(float(r), "degenerate", eigs, 0))
            continue
        nneg = sum(1 for e in eigs if e < 0)
        kind = "minimum" if nneg == 0 else ("maximum" if nneg == len(eigs) else "saddle")
        out.append(CriticalPoint(float(r), kind, eigs, nneg))
    return out


@dataclass(frozen=True, eq=False)
class LinearGroundState:
    E0: float
    psi0: Field
    gap: float = field(default=np.inf)


def linear_ground_state(spec: PotentialSpec | None, grid: Grid) -> LinearGroundState:
    """Lowest eigenpair -E0, psi0 of -Δ + V, psi0 > 0 and L2-normalized."""
    from .operators import assemble_H0, count_below, smallest_eigs
    V = evaluate(spec, grid).values
    H = assemble_H0(V, grid)
    if count_below(H, 0.0)[0] == 0:
        raise HypothesisViolation("H3 violated: -Δ+V has no negative eigenvalue")
    pairs = smallest_eigs(H, 2)
    lam, vec = pairs[0]
    psi = vec.values.copy()
    if psi[grid.interior].sum() < 0:
        psi = -psi
    if np.any(psi[grid.interior] <= 0):
        raise RuntimeError("ground state eigenvector is not positive")
    gap = pairs[1].value - lam if len(pairs) > 1 else np.inf
    return LinearGroundState(-lam, Field(grid, psi), gap)
