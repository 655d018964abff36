"""Newton correctors, branch points and seeding from zero and from infinity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from ..core import Field
from ..operators import Inertia, SingularOperatorError, inertia, smallest_eigs
from ..operators import bordered_solve as _bordered
from ..limiting import LimitingProfile, ProfileTemplate, build_template
from .problem import PHYSICAL, RENORMALIZED, Discretization


class SolverError(RuntimeError):
    """Newton failure; carries the residual history."""

    def __init__(self, msg, history=()):
        super().__init__(msg)
        self.history = list(history)


class SingularJacobian(SolverError):
    pass


@dataclass(eq=False)
class BranchPoint:
    E: float
    psi: Field
    frame: str
    N: float
    Q: float
    energy: float
    G: float
    Vterm: float
    lplus_inertia: Inertia
    lplus_min_eigs: list
    lminus_min_eig: float
    newton_residual: float
    iterations: int = 0
    extras: dict = field(default_factory=dict)
    disc: object = field(default=None, repr=False)

    @property
    def index(self) -> int:
        return self.lplus_inertia.n_neg

    def scalars(self) -> dict:
        return {"E": self.E, "frame": self.frame, "N": self.N, "Q": self.Q,
                "energy": self.energy, "G": self.G, "Vterm": self.Vterm,
                "lplus_inertia": self.lplus_inertia.to_dict(),
                "lplus_min_eigs": list(self.lplus_min_eigs),
                "lminus_min_eig": self.lminus_min_eig,
                "newton_residual": self.newton_residual, "iterations": self.iterations}


def as_discretization(problem, grid=None, frame=PHYSICAL) -> Discretization:
    if isinstance(problem, Discretization):
        return problem
    return Discretization(problem, grid, frame)


def _even(u: np.ndarray) -> np.ndarray:
    return 0.5 * (u + u[::-1])


def make_point(disc: Discretization, u: np.ndarray, E: float, res: float, iters: int = 0,
               n_eigs: int = 3) -> BranchPoint:
    """Collect functionals and spectral data at a converged state."""
    psi = Field.from_unknowns(disc.grid, u)
    f = disc.functionals(psi, E)
    W = disc.potential(E)
    Lp = disc.lplus(u, E, W)
    Lm = disc.lminus(u, E, W)
    tol = disc.tol_zero(E)
    scale = disc.eig_scale(E)
    inn = inertia(Lp, 0.0, tol)
    inn = Inertia(inn.n_neg, inn.n_zero, inn.n_pos, tol * scale, inn.perturbed)
    k = max(n_eigs, min(inn.n_neg + 1, 10))
    ev = [e.value * scale for e in smallest_eigs(Lp, k)]
    em = smallest_eigs(Lm, 1)[0].value * scale
    return BranchPoint(E, psi, disc.frame, f["N"], f["Q"], f["energy"], f["G"], f["Vterm"],
                       inn, ev, em, res, iters, {}, disc)


def _resnorm(disc, u, E, W=None):
    return disc.norm(disc.residual_unknowns(u, E, W))


def _converged(disc, nf, u, E, tol):
    return nf < tol * (1.0 + disc.norm(u)) * disc.residual_scale(E)


def _newton_fixed(disc: Discretization, u: np.ndarray, E: float, tol: float,
                  max_iter: int = 50, symmetric: bool = False):
    W = disc.potential(E)
    if symmetric:
        u = _even(u)
    hist = []
    for it in range(max_iter + 1):
        F = disc.residual_unknowns(u, E, W)
        nf = disc.norm(F)
        hist.append(nf)
        if not np.isfinite(nf):
            raise SolverError("Newton produced non-finite values", hist)
        if _converged(disc, nf, u, E, tol):
            return u, nf, it
        if it == max_iter:
            break
        J = disc.lplus(u, E, W)
        try:
            y = solve_banded((1, 1), J.banded(), -F * J.sqrt_mass, check_finite=False)
        except (LinAlgError, ValueError) as exc:
            raise SingularJacobian("Jacobian singular", hist) from exc
        du = y / J.sqrt_mass
        if not np.all(np.isfinite(du)) or disc.norm(du) > 1e12 * (1.0 + disc.norm(u)):
            raise SingularJacobian("Jacobian singular", hist)
        if symmetric:
            du = _even(du)
        t = 1.0
        while True:
            cand = u + t * du
            nc = _resnorm(disc, cand, E, W)
            if nc <= (1 - 1e-4 * t) * nf or _converged(disc, nc, cand, E, tol):
                break
            t *= 0.5
            if t < 1.0 / 1024:
                raise SolverError("Newton line search failed", hist)
        u = cand
    raise SolverError(f"Newton did not converge in {max_iter} iterations", hist)


def newton_solve(problem, psi_guess: Field, E: float, tol: float = 1e-10, *,
                 frame: str = PHYSICAL, symmetric: bool = False, max_iter: int = 50,
                 n_eigs: int = 3) -> BranchPoint:
    """Damped Newton for F(ψ, E) = 0 at fixed E with Jacobian L₊."""
    disc = as_discretization(problem, psi_guess.grid, frame)
    u, nf, it = _newton_fixed(disc, psi_guess.unknowns.copy(), E, tol, max_iter, symmetric)
    return make_point(disc, u, E, nf, it, n_eigs)


def bordered_solve(J, col, row, corner, rhs_u, rhs_s):
    """Solve [J, col; <row, .>, corner][x; t] = [rhs_u; rhs_s] with the weighted inner product."""
    sm = J.sqrt_mass
    try:
        y, t = _bordered(J, col * sm, row * sm, corner, rhs_u * sm, rhs_s)
    except SingularOperatorError as exc:
        raise SingularJacobian("bordered Jacobian singular") from exc
    return y / sm, float(t[0])


def hyperplane_correct(disc: Discretization, u_pred: np.ndarray, E_pred: float,
                       dir_u: np.ndarray, dir_E: float, tol: float, max_iter: int = 50,
                       symmetric: bool = False, E_weight: float = 1.0):
    """Newton on F(u,E) = 0, <dir_u, u - u_pred> + w dir_E (E - E_pred) = 0."""
    u, E = u_pred.copy(), float(E_pred)
    if symmetric:
        u = _even(u)
    hist = []

    def constraint(u, E):
        return disc.dot(dir_u, u - u_pred) + E_weight * dir_E * (E - E_pred)

    for it in range(max_iter + 1):
        F = disc.residual_unknowns(u, E)
        g = constraint(u, E)
        nf = disc.norm(F)
        hist.append(nf)
        if not np.isfinite(nf) or not np.isfinite(E) or E <= 0:
            raise SolverError("corrector left the admissible region", hist)
        dnorm = math.sqrt(disc.dot(dir_u, dir_u) + (E_weight * dir_E) ** 2)
        if _converged(disc, nf, u, E, tol) and abs(g) < 1e-10 * dnorm * (1 + disc.norm(u)):
            return u, E, nf, it
        if it == max_iter:
            break
        J = disc.lplus(u, E)
        du, dE = bordered_solve(J, disc.dF_dE(u, E), dir_u, E_weight * dir_E, -F, -g)
        if symmetric:
            du = _even(du)
        t = 1.0
        merit = math.hypot(nf, g)
        while True:
            cu, cE = u + t * du, E + t * dE
            if cE > 0:
                m = math.hypot(_resnorm(disc, cu, cE), constraint(cu, cE))
                if m <= (1 - 1e-4 * t) * merit or _converged(disc, m, cu, cE, tol):
                    break
            t *= 0.5
            if t < 1.0 / 1024:
                raise SolverError("corrector line search failed", hist)
        u, E = cu, cE
    raise SolverError(f"corrector did not converge in {max_iter} iterations", hist)


def seed_from_zero(problem, lin, a: float, *, grid=None, tol: float = 1e-10,
                   a_max: float = 0.2, n_eigs: int = 3) -> BranchPoint:
    """Small solution ψ ≈ aψ₀ bifurcating from the linear ground state.

    The predictor uses E ≈ E0 - σ a^{2p} ∫ψ₀^{2p+2}; the corrector fixes
    <ψ₀, ψ> = a and leaves E free.
    """
    if not a > 0:
        raise ValueError("amplitude must be positive")
    if a > a_max:
        raise ValueError(f"amplitude {a} exceeds a_max = {a_max}")
    disc = as_discretization(problem, grid or lin.psi0.grid, PHYSICAL)
    if disc.frame != PHYSICAL:
        raise ValueError("seeding from zero works in the physical frame")
    p, s = disc.p, disc.sigma
    psi0 = lin.psi0.unknowns
    if disc.grid != lin.psi0.grid:
        raise ValueError("linear ground state lives on a different grid")
    w = disc.lap.mass
    E_pred = lin.E0 - s * a ** (2 * p) * float(np.dot(w, np.abs(psi0) ** (2 * p + 2)))
    try:
        u, E, nf, it = hyperplane_correct(disc, a * psi0, E_pred, psi0, 0.0, tol)
    except SolverError as exc:
        raise SolverError("seed amplitude too large", exc.history) from exc
    pt = make_point(disc, u, E, nf, it, n_eigs)
    pt.extras["E_predicted"] = E_pred
    pt.extras["amplitude"] = a
    return pt


def seed_from_infinity(problem, template: ProfileTemplate, profile: LimitingProfile, *,
                       grid, tol: float = 1e-10, E_switch: float = 25.0,
                       symmetric: bool = False, n_eigs: int = 3) -> BranchPoint:
    """Large-E solution near the template, computed in the renormalized frame."""
    E = template.E
    if E < E_switch:
        raise ValueError(f"E = {E} is below E_switch = {E_switch}")
    disc = as_discretization(problem, grid, RENORMALIZED)
    if disc.frame != RENORMALIZED:
        raise ValueError("seeding from infinity works in the renormalized frame")
    guess = build_template(template, profile, disc.grid, "renormalized")
    try:
        u, nf, it = _newton_fixed(disc, guess.unknowns.copy(), E, tol, symmetric=symmetric)
    except SolverError as exc:
        raise SolverError("E too small for template", exc.history) from exc
    pt = make_point(disc, u, E, nf, it, n_eigs)
    pt.extras["template"] = template.to_dict()
    return pt
