"""Branches, predictor-corrector continuation, event detection and branch switching."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from ..core import Field, Grid
from ..operators import Inertia, inertia, smallest_eigs
from .problem import PHYSICAL, RENORMALIZED, Discretization, convert
from .solvers import (BranchPoint, SolverError, _even, _newton_fixed,
                      bordered_solve, hyperplane_correct, make_point)

log = logging.getLogger(__name__)


@dataclass
class ContinuationConfig:
    E_min: float = 0.05
    E_max: float = 100.0
    step: float = 0.01
    step_min: float = 1e-5
    step_max: float = 1.0
    growth: float = 1.3
    fast_iterations: int = 3
    fixed_step: bool = False
    tol_newton: float = 1e-10
    max_iter: int = 50
    E_switch: float = 25.0
    symmetric: bool = False
    detect_events: bool = True
    max_points: int = 20000
    n_eigs: int = 3
    mode: str = "natural"
    event_bracket: float = 1e-6
    jump_factor: float = 10.0

    def __post_init__(self):
        if not 0 < self.E_min < self.E_max:
            raise ValueError("need 0 < E_min < E_max")
        if not 0 < self.step_min <= self.step <= self.step_max:
            raise ValueError("need 0 < step_min <= step <= step_max")
        if not self.tol_newton > 0:
            raise ValueError("tol_newton must be positive")
        if self.mode not in ("natural", "arclength"):
            raise ValueError("mode is natural or arclength")


@dataclass(eq=False)
class BifurcationEvent:
    kind: str
    E_star: float
    kernel_vector: Field
    inertia_before: Inertia
    inertia_after: Inertia
    symmetry_of_kernel: str
    eigenvalue: float
    bracket: tuple
    psi_star: Field
    frame: str
    id: str = ""

    def summary(self) -> dict:
        return {"id": self.id, "kind": self.kind, "E_star": self.E_star,
                "eigenvalue": self.eigenvalue, "bracket": list(self.bracket),
                "symmetry_of_kernel": self.symmetry_of_kernel, "frame": self.frame,
                "inertia_before": self.inertia_before.to_dict(),
                "inertia_after": self.inertia_after.to_dict()}


@dataclass(eq=False)
class Branch:
    id: str
    discretizations: dict
    points: list = field(default_factory=list)
    seed_kind: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    status: str = "open"
    symmetric: bool = False
    notes: list = field(default_factory=list)

    def disc(self, frame: str) -> Discretization:
        return self.discretizations[frame]

    @property
    def problem(self):
        return next(iter(self.discretizations.values())).problem

    @property
    def E(self) -> np.ndarray:
        return np.array([p.E for p in self.points])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])

    def point_at(self, E: float, tol: float = 1e-9):
        for p in self.points:
            if abs(p.E - E) <= tol * max(1.0, E):
                return p
        return None


def make_branch(id: str, problem, physical_grid: Grid, renormalized_grid: Grid | None = None,
                seed: BranchPoint | None = None, seed_kind: dict | None = None,
                symmetric: bool = False) -> Branch:
    discs = {PHYSICAL: Discretization(problem, physical_grid, PHYSICAL)}
    if renormalized_grid is not None:
        discs[RENORMALIZED] = Discretization(problem, renormalized_grid, RENORMALIZED)
    b = Branch(id, discs, [], seed_kind or {}, symmetric=symmetric)
    if seed is not None:
        b.points.append(seed)
    return b


def enforce_symmetry(psi: Field, reflection: str = "x->-x") -> Field:
    """Even part (ψ(x) + ψ(-x))/2 of a line-frame field."""
    if reflection != "x->-x":
        raise ValueError("only the reflection x -> -x is supported")
    if psi.grid.frame != "line":
        raise ValueError("reflection symmetry needs the line frame")
    return Field(psi.grid, 0.5 * (psi.values + psi.values[::-1]))


def kernel_symmetry(phi: Field, tol: float = 1e-6) -> str:
    if phi.grid.frame != "line":
        return "n/a"
    v = phi.values
    nrm = math.sqrt(float(np.dot(phi.grid.weights, v * v)))
    if np.max(np.abs(v + v[::-1])) < tol * nrm:
        return "odd"
    if np.max(np.abs(v - v[::-1])) < tol * nrm:
        return "even"
    return "none"


# tangents -------------------------------------------------------------------

def natural_tangent(disc: Discretization, u: np.ndarray, E: float, symmetric=False) -> np.ndarray:
    """∂u/∂E = -L₊⁻¹ ∂F/∂E."""
    J = disc.lplus(u, E)
    y = solve_banded((1, 1), J.banded(), -disc.dF_dE(u, E) * J.sqrt_mass, check_finite=False)
    t = y / J.sqrt_mass
    return _even(t) if symmetric else t


def arclength_tangent(disc, u, E, ref_u, ref_E, symmetric=False):
    """Unit tangent (t_u, t_E) to the solution curve, oriented along (ref_u, ref_E)."""
    J = disc.lplus(u, E)
    tu, tE = bordered_solve(J, disc.dF_dE(u, E), ref_u, ref_E, np.zeros(J.size), 1.0)
    if symmetric:
        tu = _even(tu)
    nrm = math.sqrt(disc.dot(tu, tu) + tE * tE)
    tu, tE = tu / nrm, tE / nrm
    if disc.dot(tu, ref_u) + tE * ref_E < 0:
        tu, tE = -tu, -tE
    return tu, tE


# continuation ----------------------------------------------------------------

def _point_disc(branch: Branch, pt: BranchPoint) -> Discretization:
    return branch.disc(pt.frame)


def _target_frame(branch, E, direction, cfg):
    if RENORMALIZED not in branch.discretizations:
        return PHYSICAL
    if direction > 0:
        return RENORMALIZED if E >= cfg.E_switch - 1e-12 else PHYSICAL
    return PHYSICAL if E < cfg.E_switch - 1e-12 else RENORMALIZED


def change_frame(branch: Branch, pt: BranchPoint, frame: str, cfg: ContinuationConfig) -> BranchPoint:
    """Re-solve a point in another frame at the same E."""
    dst = branch.disc(frame)
    f = convert(pt.psi, pt.E, dst.p, pt.frame, frame, dst.grid)
    u, nf, it = _newton_fixed(dst, f.unknowns.copy(), pt.E, cfg.tol_newton, cfg.max_iter,
                              branch.symmetric)
    new = make_point(dst, u, pt.E, nf, it, cfg.n_eigs)
    new.extras["converted_from"] = pt.frame
    return new


def continue_branch(branch: Branch, direction: int = 1, config: ContinuationConfig | None = None,
                    stop_fn=None) -> Branch:
    """Extend ``branch`` from its last point in the direction of increasing (+1)
    or decreasing (-1) E.

    Natural continuation with tangent -L₊⁻¹F_E; pseudo-arclength when natural
    steps fail near a fold.  Inertia changes of L₊ between accepted points are
    localized by :func:`detect_event`.
    """
    cfg = config or ContinuationConfig()
    if not branch.points:
        raise ValueError("branch has no points")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    sym = branch.symmetric or cfg.symmetric
    branch.symmetric = sym
    mode = cfg.mode
    step = cfg.step
    pt = branch.points[-1]
    target = _target_frame(branch, pt.E, direction, cfg)
    if target != pt.frame:
        pt = change_frame(branch, pt, target, cfg)
        branch.points.append(pt)
    disc = _point_disc(branch, pt)
    tan_u = natural_tangent(disc, pt.psi.unknowns, pt.E, sym)
    # orient the arclength tangent along the requested E direction
    nrm = math.sqrt(disc.dot(tan_u, tan_u) + 1.0)
    arc_u, arc_E = direction * tan_u / nrm, direction / nrm
    branch.status = "open"
    failures = 0
    while len(branch.points) < cfg.max_points:
        E0 = pt.E
        if (direction > 0 and E0 >= cfg.E_max - 1e-12) or (direction < 0 and E0 <= cfg.E_min + 1e-12):
            branch.status = "complete"
            break
        u0 = pt.psi.unknowns
        try:
            if mode == "natural":
                dE = direction * step
                E1 = E0 + dE
                land = [cfg.E_max, cfg.E_min]
                if RENORMALIZED in branch.discretizations:
                    land.append(cfg.E_switch)
                for Eb in land:
                    if (E0 - Eb) * (E1 - Eb) < 0 and abs(E0 - Eb) > 1e-12:
                        E1 = Eb
                pred = u0 + (E1 - E0) * tan_u
                u1, nf, it = _newton_fixed(disc, pred, E1, cfg.tol_newton, cfg.max_iter, sym)
                plen = disc.norm(pred - u0) + abs(E1 - E0)
            else:
                ds = step
                Ep = E0 + ds * arc_E
                if (direction > 0 and Ep > cfg.E_max) or (direction < 0 and Ep < cfg.E_min):
                    # finish on the bound with a natural step
                    mode = "natural"
                    tan_u = arc_u / arc_E
                    continue
                pred = u0 + ds * arc_u
                u1, E1, nf, it = hyperplane_correct(disc, pred, Ep, arc_u, arc_E,
                                                    cfg.tol_newton, cfg.max_iter, sym)
                plen = ds
            if disc.norm(u1 - u0) > cfg.jump_factor * plen:
                raise SolverError("corrector jumped away from the predictor")
            if mode == "natural" and cfg.detect_events:
                _check_index_change(disc, u0, E0, u1, E1, step, cfg, sym)
        except SolverError as exc:
            failures += 1
            if cfg.fixed_step:
                branch.status = "stalled"
                branch.notes.append(f"fixed step failed at E={E0}: {exc}")
                break
            step *= 0.5
            if step < cfg.step_min:
                if mode == "natural":
                    mode = "arclength"
                    step = max(cfg.step_min * 16, 1e-3)
                    arc_u, arc_E = _orient_from_secant(branch, disc, pt, direction, sym)
                    log.info("switching to pseudo-arclength at E=%g", E0)
                    continue
                branch.status = "stalled"
                branch.notes.append(f"step underflow at E={E0}: {exc}")
                break
            continue
        new = make_point(disc, u1, E1, nf, it, cfg.n_eigs)
        new.extras["mode"] = mode
        # tangents at the new point
        if mode == "natural":
            try:
                new_tan_u = natural_tangent(disc, u1, E1, sym)
            except Exception:
                new_tan_u = (u1 - u0) / (E1 - E0)
            nrm = math.sqrt(disc.dot(new_tan_u, new_tan_u) + 1.0)
            new_arc = (np.sign(E1 - E0) * new_tan_u / nrm, np.sign(E1 - E0) / nrm)
        else:
            new_arc = arclength_tangent(disc, u1, E1, arc_u, arc_E, sym)
        if cfg.detect_events and new.index != pt.index:
            ev = detect_event(disc, pt, new, cfg, sym, tangents=((arc_u, arc_E), new_arc))
            ev.id = f"{branch.id}-ev{len(branch.events)}"
            branch.events.append(ev)
            if ev.kind == "degenerate":
                branch.points.append(new)
                branch.status = "degenerate"
                break
        if _revisits(branch, new, disc):
            branch.points.append(new)
            branch.status = "loop"
            break
        branch.points.append(new)
        if stop_fn is not None and stop_fn(new):
            branch.status = "stopped"
            break
        pt = new
        if mode == "natural":
            tan_u = new_tan_u
        arc_u, arc_E = new_arc
        if mode == "arclength" and abs(arc_E) > 0.5 * math.sqrt(disc.dot(arc_u, arc_u) + arc_E**2) \
                and not cfg.mode == "arclength" and np.sign(arc_E) == direction:
            # well away from a fold again
            mode = "natural"
            tan_u = arc_u / arc_E
            step = min(max(step, cfg.step), cfg.step_max)
        if mode == "arclength" and np.sign(arc_E) != direction and arc_E != 0:
            # passed a fold: the branch now runs the other way in E
            direction = -direction
        if not cfg.fixed_step and it <= cfg.fast_iterations:
            step = min(step * cfg.growth, cfg.step_max)
        # frame change at E_switch
        target = _target_frame(branch, pt.E, direction, cfg)
        if target != pt.frame:
            pt = change_frame(branch, pt, target, cfg)
            branch.points.append(pt)
            disc = _point_disc(branch, pt)
            tan_u = natural_tangent(disc, pt.psi.unknowns, pt.E, sym)
            nrm = math.sqrt(disc.dot(tan_u, tan_u) + 1.0)
            arc_u, arc_E = direction * tan_u / nrm, direction / nrm
            if mode == "arclength":
                mode = "natural"
    else:
        branch.status = "max_points"
    return branch


def _check_index_change(disc, u0, E0, u1, E1, step, cfg, sym):
    """Guard natural steps that change the Morse index against jumps across a fold.

    Such a step is only accepted at the base step size, and only when the
    solution at the middle E lies close to the chord (a smooth passage).
    """
    n0 = inertia(disc.lplus(u0, E0), 0.0, disc.tol_zero(E0)).n_neg
    n1 = inertia(disc.lplus(u1, E1), 0.0, disc.tol_zero(E1)).n_neg
    if n0 == n1:
        return
    if step > cfg.step:
        raise SolverError("index change on a large step; refining")
    Em = 0.5 * (E0 + E1)
    um, _, _ = _newton_fixed(disc, 0.5 * (u0 + u1), Em, cfg.tol_newton, cfg.max_iter, sym)
    if disc.norm(um - 0.5 * (u0 + u1)) > 0.25 * disc.norm(u1 - u0):
        raise SolverError("index change without a smooth passage (fold jump)")


def _orient_from_secant(branch, disc, pt, direction, sym):
    prev = None
    for q in reversed(branch.points[:-1]):
        if q.frame == pt.frame:
            prev = q
            break
    if prev is None:
        ref_u, ref_E = np.zeros(disc.grid.nunknowns), float(direction)
    else:
        ref_u = pt.psi.unknowns - prev.psi.unknowns
        ref_E = pt.E - prev.E
    return arclength_tangent(disc, pt.psi.unknowns, pt.E, ref_u, ref_E, sym)


def _revisits(branch, new, disc, skip: int = 10):
    pts = [q for q in branch.points[:-skip] if q.frame == new.frame] if len(branch.points) > skip else []
    for q in pts:
        if abs(q.E - new.E) < 1e-8 * max(1.0, new.E) and abs(q.N - new.N) < 1e-8 * max(1.0, new.N):
            if disc.norm(q.psi.unknowns - new.psi.unknowns) < 1e-6 * (1 + disc.norm(new.psi.unknowns)):
                return True
    return False


# events -----------------------------------------------------------------------

def detect_event(disc: Discretization, pa: BranchPoint, pb: BranchPoint,
                 config: ContinuationConfig | None = None, symmetric: bool = False,
                 tangents=None) -> BifurcationEvent:
    """Localize the L₊ inertia change between two accepted points.

    Bisection along the secant with a hyperplane corrector, then a secant
    refinement on the crossing eigenvalue.
    """
    cfg = config or ContinuationConfig()
    ua, ub = pa.psi.unknowns, pb.psi.unknowns
    Ea, Eb = pa.E, pb.E
    du, dE = ub - ua, Eb - Ea
    na, nb = pa.index, pb.index
    k = min(na, nb)

    def solve_at(theta):
        pred = ua + theta * du
        Ep = Ea + theta * dE
        u, E, nf, it = hyperplane_correct(disc, pred, Ep, du, dE, cfg.tol_newton,
                                          cfg.max_iter, symmetric)
        return u, E

    def crossing_eig(u, E):
        Lp = disc.lplus(u, E)
        pairs = smallest_eigs(Lp, min(k + 2, 10))
        return pairs[k], Lp

    lo, hi = 0.0, 1.0
    ulo, Elo, uhi, Ehi = ua, Ea, ub, Eb
    Estar_scale = max(abs(Ea), abs(Eb))
    for _ in range(200):
        if abs(Ehi - Elo) < cfg.event_bracket * Estar_scale and hi - lo < 1e-3:
            break
        if hi - lo < 1e-12:
            break
        mid = 0.5 * (lo + hi)
        u, E = solve_at(mid)
        n = inertia(disc.lplus(u, E), 0.0, disc.tol_zero(E)).n_neg
        if n == na:
            lo, ulo, Elo = mid, u, E
        else:
            hi, uhi, Ehi = mid, u, E
    # secant refinement on the crossing eigenvalue
    plo, _ = crossing_eig(ulo, Elo)
    phi_, _ = crossing_eig(uhi, Ehi)
    a, fa, b, fb = lo, plo.value, hi, phi_.value
    best = (ulo, Elo, plo) if abs(fa) < abs(fb) else (uhi, Ehi, phi_)
    tol = disc.tol_zero(best[1])
    for _ in range(8):
        if abs(best[2].value) < 0.01 * tol or fa == fb:
            break
        th = a - fa * (b - a) / (fb - fa)
        if not (lo <= th <= hi):
            th = 0.5 * (a + b)
        u, E = solve_at(th)
        pr, _ = crossing_eig(u, E)
        if abs(pr.value) < abs(best[2].value):
            best = (u, E, pr)
        if np.sign(pr.value) == np.sign(fa):
            a, fa = th, pr.value
        else:
            b, fb = th, pr.value
    u, Estar, pair = best
    Lp = disc.lplus(u, Estar)
    inn = inertia(Lp, 0.0, disc.tol_zero(Estar))
    scale = disc.eig_scale(Estar)
    phi = pair.vector
    # fold: the E-component of the arclength tangent changes sign between the
    # accepted points, or E along the bracket overshoots both endpoints
    kind = "simple_crossing"
    if tangents is not None and np.sign(tangents[0][1]) != np.sign(tangents[1][1]):
        kind = "fold"
    margin = 1e-9 * max(1.0, abs(Estar))
    if (Estar - Ea) * (Estar - Eb) > 0 and min(abs(Estar - Ea), abs(Estar - Eb)) > margin:
        kind = "fold"
    if inn.n_zero >= 2 or abs(nb - na) >= 2:
        kind = "degenerate"
    sc = lambda i: Inertia(i.n_neg, i.n_zero, i.n_pos, i.tol_zero, i.perturbed)
    return BifurcationEvent(kind, float(Estar), phi, sc(pa.lplus_inertia), sc(pb.lplus_inertia),
                            kernel_symmetry(phi), pair.value * scale, (float(Elo), float(Ehi)),
                            Field.from_unknowns(disc.grid, u), disc.frame)


# branch switching -------------------------------------------------------------

class NoSwitchError(RuntimeError):
    pass


def switch_branch(event: BifurcationEvent, parent: Branch, delta: float,
                  config: ContinuationConfig | None = None, new_id: str | None = None,
                  continue_both: bool = True) -> Branch:
    """Leave the parent at a simple crossing along the kernel vector.

    The seed solves F = 0 with <φ, ψ - ψ*> = delta and E free.  The new
    branch is continued forward to the E bound and backward towards the
    crossing; the returned branch is ordered by increasing distance from ψ*.
    """
    cfg = config or ContinuationConfig()
    if event.kind != "simple_crossing":
        raise ValueError("switching needs a simple crossing")
    disc = parent.disc(event.frame)
    phi = event.kernel_vector.unknowns
    phi = phi / math.sqrt(disc.dot(phi, phi))
    star = event.psi_star.unknowns
    u, E, nf, it = hyperplane_correct(disc, star + delta * phi, event.E_star, phi, 0.0,
                                      cfg.tol_newton, cfg.max_iter, False)
    # compare with the parent branch at the same E
    try:
        up, _, _ = _newton_fixed(disc, star.copy(), E, cfg.tol_newton, cfg.max_iter,
                                 parent.symmetric)
        if disc.norm(u - up) < abs(delta) / 10:
            raise NoSwitchError("transcritical/no-switch: seed collapsed onto the parent branch")
    except SolverError:
        pass
    seed = make_point(disc, u, E, nf, it, cfg.n_eigs)
    nid = new_id or f"{parent.id}-sw{'+' if delta > 0 else '-'}"
    kind = {"kind": "switched", "parent": parent.id, "event": event.id, "delta": delta}
    discs = dict(parent.discretizations)
    fwd = Branch(nid, discs, [seed], kind, symmetric=False)
    side = 1 if E >= event.E_star else -1
    continue_branch(fwd, side, replace(cfg, symmetric=False))
    if not continue_both:
        return fwd
    back = Branch(nid, discs, [seed], kind, symmetric=False)
    sgn = 1.0 if delta > 0 else -1.0

    def reached_parent(q):
        if q.frame != event.frame:
            return False
        c = sgn * disc.dot(phi, q.psi.unknowns - star)
        return c < 0.1 * abs(delta) or (q.E - event.E_star) * side <= 0

    bcfg = replace(cfg, symmetric=False, step=min(cfg.step, 1e-3))
    continue_branch(back, -side, bcfg, stop_fn=reached_parent)
    if back.status == "stopped" and len(back.points) > 1:
        # the point that triggered the stop lies past the crossing
        back.points.pop()
    merged = Branch(nid, discs, list(reversed(back.points[1:])) + fwd.points, kind,
                    back.events + fwd.events, fwd.status, False,
                    back.notes + fwd.notes + [f"backward leg: {back.status}"])
    return merged
