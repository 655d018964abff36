"""Linearized operators, exact inertia counts and constrained solves.

Every operator is a symmetric tridiagonal matrix, so inertia is obtained
from the Sturm sequence (the pivots of the LDL^T factorization of S - s),
which is exact up to rounding for each eigenvalue separated from the
shift.  Small eigenpairs come from bisection on the same counts followed by
shift-invert block inverse iteration.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import solve_banded

from .core import Field, Grid, OperatorMatrix, laplacian_matrix


class SingularOperatorError(RuntimeError):
    pass


class EigenConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (best residual {residual:.3e})")
        self.residual = residual


@numba.njit(cache=True)
def _sturm_count(diag, off, shift):
    """Number of negative pivots of LDL^T(S - shift); -1 on an exact zero pivot."""
    count = 0
    d = diag[0] - shift
    if d == 0.0:
        return -1
    if d < 0.0:
        count += 1
    for i in range(1, diag.shape[0]):
        d = diag[i] - shift - off[i - 1] * off[i - 1] / d
        if d == 0.0:
            return -1
        if d < 0.0:
            count += 1
    return count


def _scale(op: OperatorMatrix) -> float:
    s = np.max(np.abs(op.diag))
    if len(op.off):
        s = max(s, 2 * np.max(np.abs(op.off)))
    return max(s, 1.0)


def count_below(op: OperatorMatrix, shift: float) -> tuple[int, float]:
    """Eigenvalues of op strictly below ``shift``; returns (count, shift used)."""
    s = float(shift)
    bump = 1e-12 * _scale(op)
    for k in range(8):
        c = _sturm_count(op.diag, op.off, s)
        if c >= 0:
            return c, s
        s = shift + (k + 1) * bump * (-1) ** k
    raise SingularOperatorError("Sturm count broke down repeatedly")


@dataclass(frozen=True)
class Inertia:
    n_neg: int
    n_zero: int
    n_pos: int
    tol_zero: float
    perturbed: bool = False

    @property
    def size(self):
        return self.n_neg + self.n_zero + self.n_pos

    def to_dict(self):
        return {"n_neg": self.n_neg, "n_zero": self.n_zero, "n_pos": self.n_pos,
                "tol_zero": self.tol_zero}


def inertia(op: OperatorMatrix, shift: float = 0.0, tol_zero: float = 1e-6) -> Inertia:
    """Counts of eigenvalues below, within and above [shift - tol, shift + tol]."""
    lo, s_lo = count_below(op, shift - tol_zero)
    hi, s_hi = count_below(op, shift + tol_zero)
    perturbed = s_lo != shift - tol_zero or s_hi != shift + tol_zero
    if perturbed:
        warnings.warn("inertia: zero pivot, shift perturbed", RuntimeWarning)
    return Inertia(lo, hi - lo, op.size - hi, tol_zero, perturbed)


def default_tol_zero(E: float) -> float:
    return 1e-6 * max(1.0, abs(E))


def assemble_H0(V: np.ndarray, grid: Grid, E: float = 0.0) -> OperatorMatrix:
    lap = laplacian_matrix(grid)
    return lap.plus_diagonal(V[grid.interior] + E, "H0", E)


def _power_term(problem, psi: Field):
    a = np.abs(psi.unknowns)
    return problem.sigma * a ** (2 * problem.p)


def assemble_Lplus(problem, psi: Field, E: float, V: np.ndarray | None = None) -> OperatorMatrix:
    """-Δ + V + E + (2p+1)σ|ψ|^{2p}.

    ``V`` are nodal potential values; if omitted they are evaluated from
    ``problem.potential`` on the grid of ``psi``.
    """
    if V is None:
        V = _potential_values(problem, psi.grid)
    c = V[psi.grid.interior] + E + (2 * problem.p + 1) * _power_term(problem, psi)
    return laplacian_matrix(psi.grid).plus_diagonal(c, "Lplus", E)


def assemble_Lminus(problem, psi: Field, E: float, V: np.ndarray | None = None) -> OperatorMatrix:
    """-Δ + V + E + σ|ψ|^{2p}."""
    if V is None:
        V = _potential_values(problem, psi.grid)
    c = V[psi.grid.interior] + E + _power_term(problem, psi)
    return laplacian_matrix(psi.grid).plus_diagonal(c, "Lminus", E)


def _potential_values(problem, grid):
    if problem.potential is None:
        return np.zeros(grid.npoints)
    from .potential import evaluate
    return evaluate(problem.potential, grid).values


class EigenPair:
    """An eigenvalue with its nodal eigenvector; unpacks as (value, vector)."""

    def __init__(self, value: float, vector: Field, continuum: bool = False,
                 residual: float = 0.0):
        self.value = value
        self.vector = vector
        self.continuum = continuum
        self.residual = residual

    def __iter__(self):
        yield self.value
        yield self.vector

    def __repr__(self):
        tag = ", continuum cluster" if self.continuum else ""
        return f"EigenPair({self.value:.10g}{tag})"


def _kth_eigenvalue(op, k, lo, hi, atol):
    # smallest x with count_below(x) > k, by bisection
    while hi - lo > atol:
        mid = 0.5 * (lo + hi)
        if count_below(op, mid)[0] > k:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _gershgorin(op):
    r = np.zeros(op.size)
    r[:-1] += np.abs(op.off)
    r[1:] += np.abs(op.off)
    return float(np.min(op.diag - r)), float(np.max(op.diag + r))


def _sign_fix(y):
    big = np.abs(y) > 1e-6 * np.max(np.abs(y))
    i = int(np.argmax(big))
    return -y if y[i] < 0 else y


def _cluster_vectors(op, shift, m, rng, iters=6):
    """Orthonormal basis of the m-dimensional invariant subspace nearest ``shift``."""
    n = op.size
    ab = op.banded(shift)
    Y = rng.standard_normal((n, m))
    Y, _ = np.linalg.qr(Y)
    for _ in range(iters):
        Z = solve_banded((1, 1), ab, Y, check_finite=False)
        Y, _ = np.linalg.qr(Z)
    return Y


def _apply_S(op, Y):
    Z = op.diag[:, None] * Y
    Z[:-1] += op.off[:, None] * Y[1:]
    Z[1:] += op.off[:, None] * Y[:-1]
    return Z


def smallest_eigs(op: OperatorMatrix, k: int = 1, max_iter: int = 8,
                  tol: float | None = None) -> list[EigenPair]:
    """The k algebraically smallest eigenpairs of op.

    Eigenvectors are normalized in the weighted L2 inner product and sign
    fixed so that the first component above 1e-6 of the maximum is positive.
    Values at or above ``op.threshold - 10*tol`` are flagged as belonging to
    the discretized continuum.
    """
    if k < 1 or k > 10:
        raise ValueError("k must be in 1..10")
    k = min(k, op.size)
    scale = _scale(op)
    g_lo, g_hi = _gershgorin(op)
    atol = 1e-13 * scale
    vals = []
    lo = g_lo - 1.0
    for j in range(k):
        v = _kth_eigenvalue(op, j, lo, g_hi + 1.0, atol)
        vals.append(v)
        lo = v - 2 * atol
    vals = np.array(vals)
    # group values that bisection cannot separate from each other reliably
    groups = []
    gap = max(1e-9 * scale, 1e3 * atol)
    for j in range(k):
        if groups and vals[j] - vals[groups[-1][-1]] < gap:
            groups[-1].append(j)
        else:
            groups.append([j])
    rng = np.random.default_rng(12345)
    out = []
    grid = op.grid
    for grp in groups:
        m = len(grp)
        center = vals[grp].mean()
        # include any further eigenvalues in the same cluster beyond k
        extra = count_below(op, center + gap)[0] - grp[-1] - 1
        mm = m + max(extra, 0)
        shift = center - 0.5 * gap - 1e-10 * scale
        best = np.inf
        for attempt in range(2):
            Y = _cluster_vectors(op, shift, mm, rng, iters=max_iter if attempt == 0 else 3 * max_iter)
            H = Y.T @ _apply_S(op, Y)
            w, Q = np.linalg.eigh(0.5 * (H + H.T))
            Y = Y @ Q
            R = _apply_S(op, Y) - Y * w[None, :]
            res = np.linalg.norm(R, axis=0)
            best = min(best, float(res.max()))
            if res.max() < 1e-10 * scale or attempt == 1:
                break
        if best > 1e-4 * scale:
            raise EigenConvergenceError("smallest_eigs: inverse iteration stalled", best)
        if mm == 1:
            # one more solve without re-orthogonalization keeps tiny tail
            # components accurate relative to their size
            z = solve_banded((1, 1), op.banded(shift), Y[:, 0], check_finite=False)
            Y = (z / np.linalg.norm(z))[:, None]
        for i in range(m):
            y = _sign_fix(Y[:, i])
            x = y / op.sqrt_mass
            vec = Field.from_unknowns(grid, x)
            cont = False
            if op.threshold is not None:
                t = tol if tol is not None else default_tol_zero(op.threshold)
                cont = w[i] >= op.threshold - 10 * t
            out.append(EigenPair(float(w[i]), vec, cont, float(res[i])))
    return out[:k]


def bordered_solve(op: OperatorMatrix, B: np.ndarray, C: np.ndarray, D: np.ndarray,
                   f: np.ndarray, g: np.ndarray, refine: int = 2):
    """Solve [S, B; C^T, D][y; t] = [f; g] for tridiagonal S (all in S-space).

    Block elimination with banded LU solves and iterative refinement on the
    full bordered system; this stays accurate when S is nearly singular as
    long as the bordered matrix is not.
    """
    B = np.asarray(B, float).reshape(op.size, -1)
    C = np.asarray(C, float).reshape(op.size, -1)
    D = np.atleast_2d(np.asarray(D, float))
    g = np.atleast_1d(np.asarray(g, float))
    bump = 0.0
    ab = op.banded()
    try:
        SB = solve_banded((1, 1), ab, B, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        bump = 1e-13 * _scale(op)
        ab = op.banded(-bump)
        SB = solve_banded((1, 1), ab, B, check_finite=False)
    schur = D - C.T @ SB
    if not np.all(np.isfinite(schur)):
        raise SingularOperatorError("bordered operator singular")
    try:
        schur_inv = np.linalg.inv(schur) if schur.size else schur
    except np.linalg.LinAlgError as exc:
        raise SingularOperatorError("bordered operator singular") from exc

    def apply(y, t):
        z = op.diag * y
        z[:-1] += op.off * y[1:]
        z[1:] += op.off * y[:-1]
        return z + B @ t, C.T @ y + D @ t

    def eliminate(f, g):
        Sf = solve_banded((1, 1), ab, f, check_finite=False)
        t = schur_inv @ (g - C.T @ Sf) if schur.size else np.zeros(0)
        return Sf - SB @ t, t

    y, t = eliminate(f, g)
    for _ in range(refine):
        rf, rg = apply(y, t)
        dy, dt = eliminate(f - rf, g - rg)
        y, t = y + dy, t + dt
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
        raise SingularOperatorError("bordered operator singular")
    return y, t


class ProjectedSolver:
    """Bordered operator [S, B; B^T, 0] set up for repeated constrained solves."""

    def __init__(self, op: OperatorMatrix, constraints=()):
        self.op = op
        self.constraints = list(constraints)
        self.scale = _scale(op)
        if self.constraints:
            B = np.column_stack([c.unknowns * op.sqrt_mass for c in self.constraints])
            G = B.T @ B
            dn = np.sqrt(np.diag(G))
            if np.any(dn == 0) or np.linalg.det(G / np.outer(dn, dn)) < 1e-12:
                raise ValueError("constraint vectors are linearly dependent")
        else:
            B = np.zeros((op.size, 0))
        self.B = B

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for the unknowns v (nodal) with <v, c_i> = 0."""
        op = self.op
        b = rhs * op.sqrt_mass
        m = self.B.shape[1]
        y, _ = bordered_solve(op, self.B, self.B, np.zeros((m, m)), b, np.zeros(m))
        ny = np.linalg.norm(y)
        if ny > np.linalg.norm(b) / (1e-12 * self.scale) and ny > 0:
            raise SingularOperatorError("projected operator singular")
        return y / op.sqrt_mass


def projected_solve(op: OperatorMatrix, rhs: Field, constraints=()) -> Field:
    """Solve P L P v = P rhs with v orthogonal to every constraint vector."""
    if not np.any(rhs.unknowns):
        return Field.zeros(rhs.grid)
    v = ProjectedSolver(op, constraints).solve(rhs.unknowns)
    return Field.from_unknowns(rhs.grid, v)


def projected_inverse_norm(op: OperatorMatrix, constraints=(), iters: int = 30) -> float:
    """Estimate of the L2 operator norm of (P L P)^{-1} on the constraint complement.

    Inverse power iteration on the symmetric bordered system; the norm is the
    reciprocal of the smallest |eigenvalue| of the compressed operator.
    """
    solver = ProjectedSolver(op, constraints)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(op.size)
    grid = op.grid
    w = op.mass

    def project(x):
        for c in constraints:
            cu = c.unknowns
            x = x - np.dot(w, x * cu) / np.dot(w, cu * cu) * cu
        return x

    # Gram-Schmidt against constraints done sequentially needs orthogonal
    # constraints; orthonormalize them first
    if constraints:
        C = np.column_stack([c.unknowns * op.sqrt_mass for c in constraints])
        Qc, _ = np.linalg.qr(C)
        constraints = [Field.from_unknowns(grid, Qc[:, i] / op.sqrt_mass)
                       for i in range(Qc.shape[1])]
    x = project(x)
    x /= math.sqrt(np.dot(w, x * x))
    est = 0.0
    for _ in range(iters):
        y = solver.solve(x)
        est = math.sqrt(np.dot(w, y * y))
        x = y / est
    return est
