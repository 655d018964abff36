"""Checks of the analytic identities, scaling laws, limit profiles and Morse counts
along computed branches, plus stability labels and report export."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Field, Grid
from .limiting import (DecompositionError, LimitingProfile, ProfileTemplate, profile_fit,
                       tail_slope)
from .continuation.problem import RENORMALIZED, Discretization, convert


@dataclass
class IdentityReport:
    name: str
    E: list
    residuals: list
    max_residual: float
    tol: float
    passed: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


@dataclass
class ScalingReport:
    window: tuple
    slopes: dict
    targets: dict
    r2: dict
    b: float
    b_last: float
    prefactors: dict
    predicted_prefactors: dict
    npoints: int

    def to_dict(self):
        return asdict(self)


@dataclass
class StabilityLabel:
    label: str
    basis: str
    inputs: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _disc(point, disc=None) -> Discretization:
    d = disc if disc is not None else getattr(point, "disc", None)
    if d is None:
        raise ValueError("point carries no discretization; pass one explicitly")
    if hasattr(d, "discretizations"):
        d = d.disc(point.frame)
    return d


def stationarity_residual(point, disc=None) -> float:
    """|G + ∫Vψ² + σQ + EN| / (EN + 1)."""
    d = _disc(point, disc)
    s = point.G + point.Vterm + d.sigma * point.Q + point.E * point.N
    return abs(s) / (point.E * point.N + 1.0)


def pohozaev_residual(point, disc=None) -> float:
    """Relative defect of (n-2)G + ∫(nV + x·∇V)ψ² + nσQ/(p+1) + nEN = 0.

    Normalized by the sum of the magnitudes of the four terms; ψ ≡ 0 gives 0.
    """
    d = _disc(point, disc)
    terms = d.pohozaev_terms(point.psi, point.E)
    total = sum(abs(v) for v in terms.values())
    if total == 0.0:
        return 0.0
    return abs(sum(terms.values())) / total


def _segments(branch):
    """Index runs of consecutive points in one frame with strictly monotone E."""
    pts = branch.points
    segs, cur = [], []
    for i, p in enumerate(pts):
        if cur:
            q = pts[cur[-1]]
            same = p.frame == q.frame and p.E != q.E
            if same and len(cur) >= 2:
                r = pts[cur[-2]]
                same = np.sign(p.E - q.E) == np.sign(q.E - r.E)
            if not same:
                segs.append(cur)
                cur = [cur[-1]] if p.frame == q.frame and p.E != q.E else []
        cur.append(i)
    if cur:
        segs.append(cur)
    return [s for s in segs if len(s) >= 3]


def _centered(E, y):
    """Second-order derivative estimates at interior nodes of a nonuniform grid."""
    E = np.asarray(E, float)
    y = np.asarray(y, float)
    h0 = E[1:-1] - E[:-2]
    h1 = E[2:] - E[1:-1]
    return (-h1 / (h0 * (h0 + h1)) * y[:-2] + (h1 - h0) / (h0 * h1) * y[1:-1]
            + h0 / (h1 * (h0 + h1)) * y[2:])


def _fd_report(branch, name, target_fn, lhs_attr, tol, eps=1e-14):
    Es, res, notes = [], [], []
    segs = _segments(branch)
    if not segs:
        raise ValueError("need at least 3 points on a monotone segment")
    if len(segs) > 1:
        notes.append(f"{len(segs)} segments (split at frame changes or folds)")
    for seg in segs:
        pts = [branch.points[i] for i in seg]
        E = np.array([p.E for p in pts])
        lhs = _centered(E, [getattr(p, lhs_attr) for p in pts])
        tgt = target_fn(pts, E)
        r = np.abs(lhs - tgt) / (np.abs(tgt) + eps)
        Es.extend(E[1:-1].tolist())
        res.extend(r.tolist())
    m = float(np.max(res))
    return IdentityReport(name, Es, res, m, tol, bool(m < tol), notes)


def energy_mass_relation(branch, tol: float = 1e-2) -> IdentityReport:
    """dℰ/dE against -E dN/dE by centered differences along the branch."""
    def target(pts, E):
        return -E[1:-1] * _centered(E, [p.N for p in pts])
    return _fd_report(branch, "energy_mass_relation", target, "energy", tol)


def dq_law(branch, tol: float = 1e-2) -> IdentityReport:
    """dQ/dE against (p+1)/(-σp) N."""
    prob = branch.problem
    c = (prob.p + 1) / (-prob.sigma * prob.p)

    def target(pts, E):
        return c * np.array([p.N for p in pts[1:-1]])
    return _fd_report(branch, "dq_law", target, "Q", tol)


def identity_report(branch, name: str, tol: float = 1e-5) -> IdentityReport:
    fn = {"stationarity": stationarity_residual, "pohozaev": pohozaev_residual}[name]
    E = [p.E for p in branch.points]
    r = [fn(p, branch) for p in branch.points]
    m = float(max(r)) if r else 0.0
    return IdentityReport(name, E, r, m, tol, bool(m < tol))


def scaling_exponents(branch, window=(50.0, 100.0)) -> ScalingReport:
    """Log-log slopes of N, Q and ||∇ψ||² in E over the window, and the constant b.

    b is the limit of Q/E^{1+1/p-n/2}; it is estimated by a linear fit of that
    ratio in 1/E over the window and extrapolated to 1/E = 0.
    """
    lo, hi = window
    if hi < 2 * lo:
        raise ValueError("fit window must span at least a factor 2 in E")
    prob = branch.problem
    p, s, n = prob.p, prob.sigma, prob.n
    seen = {}
    for q in branch.points:
        if lo - 1e-9 <= q.E <= hi + 1e-9:
            # prefer the renormalized representative of duplicated E values
            if q.E not in seen or q.frame == RENORMALIZED:
                seen[q.E] = q
    pts = [seen[e] for e in sorted(seen)]
    if len(pts) < 3:
        raise ValueError("fewer than 3 points in the fit window")
    if pts[0].E > lo * 1.05 or pts[-1].E < hi * 0.95:
        raise ValueError("fit window is not covered by the branch")
    E = np.array([q.E for q in pts])
    lE = np.log(E)
    data = {"N": np.array([q.N for q in pts]), "Q": np.array([q.Q for q in pts]),
            "G": np.array([q.G for q in pts])}
    e_n = 1 / p - n / 2
    e_q = 1 + 1 / p - n / 2
    targets = {"N": e_n, "Q": e_q, "G": e_q}
    slopes, r2 = {}, {}
    for k, y in data.items():
        ly = np.log(y)
        c = np.polyfit(lE, ly, 1)
        fit = np.polyval(c, lE)
        slopes[k] = float(c[0])
        ss = float(np.sum((ly - ly.mean()) ** 2))
        r2[k] = 1.0 - float(np.sum((ly - fit) ** 2)) / ss if ss > 0 else 1.0
    inv = 1.0 / E

    def extrapolate(y):
        return float(np.polyfit(inv, y, 1)[-1])

    b = extrapolate(data["Q"] / E ** e_q)
    pref = {"N": extrapolate(data["N"] / E ** e_n), "G": extrapolate(data["G"] / E ** e_q)}
    pred = {"N": (-s / 2) * ((2 * p + 2 - n * p) / (p + 1)) * b,
            "G": (-s / 2) * (n * p / (p + 1)) * b}
    return ScalingReport((lo, hi), slopes, targets, r2, b, float(data["Q"][-1] / E[-1] ** e_q),
                         pref, pred, len(pts))


def renormalize(point, grid: Grid | None = None, disc=None) -> Field:
    """u_E(x) = E^{-1/(2p)} ψ_E(x/√E); identity in the renormalized frame."""
    if point.frame == RENORMALIZED and (grid is None or grid == point.psi.grid):
        return point.psi
    d = _disc(point, disc)
    if grid is None:
        g = point.psi.grid
        grid = Grid(g.frame, g.L * math.sqrt(point.E), g.npoints, g.n)
    if grid.h > 0.25:
        raise ValueError("renormalized grid too coarse to resolve the profile")
    return convert(point.psi, point.E, d.p, point.frame, RENORMALIZED, grid)


def candidate_templates(critical_points, E: float, max_size: int = 3):
    cps = [c for c in critical_points if c.kind != "degenerate"]
    out = []
    for m in range(1, min(max_size, len(cps)) + 1):
        for sub in itertools.combinations(cps, m):
            for signs in itertools.product((1, -1), repeat=m):
                if signs[0] != 1 and m > 1:
                    continue
                out.append((ProfileTemplate([c.location for c in sub], signs, E), sub))
    return out


def best_template_fit(u: Field, E: float, critical_points, profile: LimitingProfile,
                      max_size: int = 3):
    """Template with the smallest decomposition remainder for a renormalized field."""
    rE = math.sqrt(E)
    best = None
    for tpl, sub in candidate_templates(critical_points, E, max_size):
        profs = [profile] * tpl.m
        if any(sg < 0 for sg in tpl.signs):
            profs = [(lambda sg: (lambda x, nu=0: sg * profile(x, nu)))(sg) for sg in tpl.signs]
        try:
            fit = profile_fit(u, profs, [c * rE for c in tpl.centers])
        except (DecompositionError, ValueError, np.linalg.LinAlgError):
            continue
        if best is None or fit.remainder_norm < best[1].remainder_norm:
            best = (tpl, fit, sub)
    return best


def limit_profile_report(branch, critical_points, profile: LimitingProfile, last: int = 5,
                         threshold: float = 0.5, E_min: float | None = None) -> dict:
    """Fit the last few large-E points to multi-profile templates."""
    pts = [q for q in branch.points if q.frame == RENORMALIZED
           and (E_min is None or q.E >= E_min)]
    if not pts:
        raise ValueError("branch has no renormalized-frame points")
    rows = []
    for q in pts[-last:]:
        u = renormalize(q)
        best = best_template_fit(u, q.E, critical_points, profile)
        if best is None or best[1].remainder_norm > threshold:
            rows.append({"E": q.E, "classified": False})
            continue
        tpl, fit, sub = best
        rE = math.sqrt(q.E)
        ratios = (fit.centers / rE).tolist()
        rows.append({"E": q.E, "classified": True, "template": tpl.to_dict(),
                     "remainder": fit.remainder_norm, "centers": fit.centers.tolist(),
                     "drift_ratio": ratios,
                     "drift": [r - c.location for r, c in zip(ratios, sub)],
                     "n_neg": q.index})
    classified = [r for r in rows if r["classified"]]
    rem = [r["remainder"] for r in classified]
    return {"branch": branch.id, "points": rows,
            "status": "classified" if len(classified) == len(rows) else "unclassified limit",
            "remainder_decreasing": bool(all(a >= b - 1e-12 for a, b in zip(rem, rem[1:])))}


def morse_index_check(point, template: ProfileTemplate, critical_points, tol: float = 1e-6) -> dict:
    """Compare n_neg(L₊) with m + Σ n_i for the template's critical points."""
    n_i = []
    for c in template.centers:
        match = [cp for cp in critical_points if abs(cp.location - c) < tol * max(1, abs(c)) + 1e-9]
        if not match or match[0].kind == "degenerate":
            return {"status": "not applicable", "passed": None}
        n_i.append(match[0].n_i)
    expected = template.m + sum(n_i)
    actual = point.lplus_inertia.n_neg
    return {"status": "checked", "expected": expected, "actual": actual,
            "passed": expected == actual}


def _monotone_runs(branch):
    """Monotone runs in E over all frames; a repeated E (frame change) is merged."""
    runs, cur = [], []
    for i, q in enumerate(branch.points):
        if cur and q.E == branch.points[cur[-1]].E:
            cur[-1] = i
            continue
        if len(cur) >= 2:
            d = np.sign(branch.points[cur[-1]].E - branch.points[cur[-2]].E)
            if np.sign(q.E - branch.points[cur[-1]].E) != d:
                runs.append(cur)
                cur = [cur[-1]]
        cur.append(i)
    if cur:
        runs.append(cur)
    return runs


def _dN_dE(branch, i):
    """Centered dN/dE on the monotone run containing point i; None at folds."""
    pts = branch.points
    runs = _monotone_runs(branch)
    for r, run in enumerate(runs):
        idx = [j for j in range(len(run)) if run[j] == i
               or (pts[run[j]].E == pts[i].E and abs(run[j] - i) == 1)]
        if not idx:
            continue
        k = idx[0]
        if len(run) < 3:
            return None
        at_fold = (k == 0 and r > 0) or (k == len(run) - 1 and r < len(runs) - 1)
        if at_fold:
            return None
        if 0 < k < len(run) - 1:
            sel = run[k - 1:k + 2]
            E = [pts[j].E for j in sel]
            return float(_centered(E, [pts[j].N for j in sel])[0])
        # one-sided second-order formula at the ends of the branch
        sel = run[:3] if k == 0 else run[-3:][::-1]
        E = np.array([pts[j].E for j in sel])
        N = np.array([pts[j].N for j in sel])
        h1, h2 = E[1] - E[0], E[2] - E[0]
        return float((N[1] - N[0]) * h2 / (h1 * (h2 - h1)) - (N[2] - N[0]) * h1 / (h2 * (h2 - h1)))
    return None


def stability_label(branch, i: int) -> StabilityLabel:
    """Orbital stability from the Morse index of L₊ and the sign of dN/dE."""
    q = branch.points[i]
    tol = q.lplus_inertia.tol_zero
    inputs = {"E": q.E, "n_neg": q.index, "lminus_min_eig": q.lminus_min_eig}
    if q.lminus_min_eig < -tol:
        return StabilityLabel("undetermined", "Lminus_indefinite", inputs)
    if q.index >= 2:
        return StabilityLabel("unstable", "multi_negative", inputs)
    if q.index == 1:
        d = _dN_dE(branch, i)
        inputs["dN_dE"] = d
        if d is None or d == 0:
            return StabilityLabel("undetermined", "slope_criterion", inputs)
        return StabilityLabel("stable" if d > 0 else "unstable", "slope_criterion", inputs)
    return StabilityLabel("undetermined", "slope_criterion", inputs)


def decay_check(point, gamma: float, disc=None, rel: float = 0.05) -> dict:
    """Tail slope of log|ψ| on [L/2, 3L/4] (physical units) against -√(E-γ)."""
    if not 0 < gamma < point.E:
        raise ValueError("need 0 < gamma < E")
    g = point.psi.grid
    x = np.abs(g.x)
    v = point.psi.values
    m = (x >= g.L / 2) & (x <= 3 * g.L / 4)
    bound = -math.sqrt(point.E - gamma) * (1 - rel)
    tail = np.abs(v[m])
    if tail.size == 0 or np.all(tail < 1e-300):
        return {"passed": True, "slope": None, "bound": bound, "note": "tail below machine range"}
    slope = tail_slope(x, v, g.L / 2, 3 * g.L / 4, g.n)
    if point.frame == RENORMALIZED:
        slope *= math.sqrt(point.E)
    return {"passed": bool(slope <= bound), "slope": slope, "bound": bound}


# export -------------------------------------------------------------------------

def write_json(obj, path) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "to_dict"):
            return o.to_dict()
        raise TypeError(type(o))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=default)


def diagram_rows(branches) -> list[dict]:
    """One row per branch point: id, E, N, Morse index, stability and event marker."""
    rows = []
    for b in branches:
        marks = {}
        for ev in b.events:
            # attach each event to the nearest accepted point
            j = int(np.argmin([abs(q.E - ev.E_star) for q in b.points]))
            marks.setdefault(j, []).append(f"{ev.kind}@{ev.E_star:.10g}")
        for i, q in enumerate(b.points):
            rows.append({"branch_id": b.id, "E": q.E, "N": q.N, "n_neg": q.index,
                         "stability": stability_label(b, i).label,
                         "event": ";".join(marks.get(i, []))})
    return rows


def write_diagram_csv(rows, path) -> None:
    cols = ["branch_id", "E", "N", "n_neg", "stability", "event"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("E", "N") else r[k]) for k in cols})
