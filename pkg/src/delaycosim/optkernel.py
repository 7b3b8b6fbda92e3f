"""Small dense LP / convex QP kernel with a binary branch-and-bound on top.

LPs go to HiGHS through :func:`scipy.optimize.linprog`, QPs to Clarabel.
Both are wrapped so callers only ever see a :class:`SolveReport`.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse
from scipy.optimize import linprog

LOG = logging.getLogger(__name__)

FEAS_TOL = 1e-6
INT_TOL = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


def _as_matrix(a, n):
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.size == 0:
        # keep the row count of an m x 0 matrix (programs without variables)
        return np.zeros((a.shape[0], n))
    a = np.atleast_2d(a)
    if a.size == 0:
        return np.zeros((0, n))
    return a


def _as_vector(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(-1)


@dataclass
class LinearProgram:
    """``min c'x  s.t.  A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub``.

    ``None`` bounds mean free variables; infinite entries are allowed.
    """

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A_ub = _as_matrix(self.A_ub, n)
        self.b_ub = _as_vector(self.b_ub, self.A_ub.shape[0])
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0])
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).reshape(-1).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).reshape(-1).copy()
        self._check()

    @property
    def n(self) -> int:
        return self.c.size

    def _check(self):
        n = self.n
        if self.A_ub.shape[1] != n or self.A_eq.shape[1] != n:
            raise ValueError("constraint matrices do not match objective dimension")
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("constraint matrix / bound length mismatch")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("variable bounds do not match objective dimension")

    def with_bounds(self, lb, ub) -> "LinearProgram":
        return LinearProgram(self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq, lb, ub)

    def residual(self, x) -> float:
        """Largest scaled constraint violation at ``x``."""
        x = np.asarray(x, dtype=float)
        worst = 0.0
        if self.b_ub.size:
            viol = self.A_ub @ x - self.b_ub
            worst = max(worst, float(np.max(viol / (1.0 + np.abs(self.b_ub)))))
        if self.b_eq.size:
            viol = np.abs(self.A_eq @ x - self.b_eq)
            worst = max(worst, float(np.max(viol / (1.0 + np.abs(self.b_eq)))))
        worst = max(worst, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        return max(worst, 0.0)


@dataclass
class QuadraticProgram(LinearProgram):
    """``min 0.5 x'Qx + c'x`` under the same constraints as :class:`LinearProgram`."""

    Q: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        n = self.n
        Q = np.zeros((n, n)) if self.Q is None else np.asarray(self.Q, dtype=float)
        if Q.shape != (n, n):
            raise ValueError("Hessian has wrong shape")
        if not np.allclose(Q, Q.T, atol=1e-9, rtol=0.0):
            raise ValueError("Hessian is not symmetric")
        if n and np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-8:
            raise ValueError("Hessian is not positive semidefinite")
        self.Q = 0.5 * (Q + Q.T)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.c @ x)


@dataclass
class SolveReport:
    status: str
    x: np.ndarray | None = None
    objective: float = np.nan
    residuals: dict = field(default_factory=dict)
    nodes: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def solve_lp(p: LinearProgram) -> SolveReport:
    """Solve an LP with HiGHS (dual simplex, deterministic)."""
    if p.n == 0:
        feasible = np.all(p.b_ub >= -FEAS_TOL) and np.all(np.abs(p.b_eq) <= FEAS_TOL)
        if not feasible:
            return SolveReport(INFEASIBLE)
        return SolveReport(OPTIMAL, np.zeros(0), 0.0, {"primal": 0.0})
    if np.any(p.lb > p.ub + FEAS_TOL):
        return SolveReport(INFEASIBLE)
    res = linprog(
        p.c,
        A_ub=p.A_ub if p.b_ub.size else None,
        b_ub=p.b_ub if p.b_ub.size else None,
        A_eq=p.A_eq if p.b_eq.size else None,
        b_eq=p.b_eq if p.b_eq.size else None,
        bounds=list(zip(_none_inf(p.lb), _none_inf(p.ub))),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
    )
    if res.status == 0:
        x = np.asarray(res.x, dtype=float)
        return SolveReport(OPTIMAL, x, float(p.c @ x), {"primal": p.residual(x)})
    if res.status == 2:
        return SolveReport(INFEASIBLE)
    if res.status == 3:
        return SolveReport(UNBOUNDED)
    return SolveReport(ITERATION_LIMIT)


def _none_inf(v):
    return [None if not np.isfinite(a) else float(a) for a in v]


def solve_qp(p: QuadraticProgram) -> SolveReport:
    """Solve a convex QP with Clarabel's interior-point method."""
    n = p.n
    if n == 0:
        return solve_lp(p)
    rows = []
    rhs = []
    cones = []
    if p.b_eq.size:
        rows.append(p.A_eq)
        rhs.append(p.b_eq)
        cones.append(clarabel.ZeroConeT(p.b_eq.size))
    ineq_rows = [p.A_ub]
    ineq_rhs = [p.b_ub]
    fin_ub = np.isfinite(p.ub)
    fin_lb = np.isfinite(p.lb)
    eye = np.eye(n)
    if fin_ub.any():
        ineq_rows.append(eye[fin_ub])
        ineq_rhs.append(p.ub[fin_ub])
    if fin_lb.any():
        ineq_rows.append(-eye[fin_lb])
        ineq_rhs.append(-p.lb[fin_lb])
    G = np.vstack(ineq_rows)
    h = np.concatenate(ineq_rhs)
    if h.size:
        rows.append(G)
        rhs.append(h)
        cones.append(clarabel.NonnegativeConeT(h.size))
    A = sparse.csc_matrix(np.vstack(rows)) if rows else sparse.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    P = sparse.triu(sparse.csc_matrix(p.Q), format="csc")

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_threads = 1
    solver = clarabel.DefaultSolver(P, p.c, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x, dtype=float)
        z = np.asarray(sol.z, dtype=float)
        stationarity = p.Q @ x + p.c + A.T @ z
        scale = 1.0 + np.abs(p.c).max(initial=0.0)
        residuals = {
            "primal": p.residual(x),
            "stationarity": float(np.abs(stationarity).max(initial=0.0) / scale),
        }
        return SolveReport(OPTIMAL, x, p.objective(x), residuals)
    if "PrimalInfeasible" in status:
        return SolveReport(INFEASIBLE)
    if "DualInfeasible" in status:
        return SolveReport(UNBOUNDED)
    LOG.debug("clarabel returned %s", status)
    return SolveReport(ITERATION_LIMIT)


def _most_fractional(x, binary_indices):
    best = None
    best_dist = None
    for i in binary_indices:
        frac = x[i] - np.floor(x[i])
        if min(frac, 1.0 - frac) <= INT_TOL:
            continue
        dist = abs(frac - 0.5)
        if best is None or dist < best_dist - 1e-12:
            best, best_dist = i, dist
    return best


def _round_binaries(x, binary_indices):
    x = x.copy()
    x[binary_indices] = np.round(x[binary_indices])
    return x


def branch_and_bound(p: LinearProgram, binary_indices, *, lexicographic: bool = True) -> SolveReport:
    """Globally minimise ``p`` with ``x[binary_indices]`` restricted to {0, 1}.

    Nodes are expanded best-bound first, branching on the most fractional
    binary (lowest index on ties). With ``lexicographic`` set, the returned
    solution is the lexicographically smallest binary vector among the
    optimal ones, which makes ties reproducible.
    """
    binary_indices = sorted(int(i) for i in binary_indices)
    lb = p.lb.copy()
    ub = p.ub.copy()
    lb[binary_indices] = np.maximum(lb[binary_indices], 0.0)
    ub[binary_indices] = np.minimum(ub[binary_indices], 1.0)
    root = p.with_bounds(lb, ub)

    counter = itertools.count()
    nodes = 0
    incumbent = None
    incumbent_obj = np.inf
    rep = solve_lp(root)
    nodes += 1
    if rep.status == UNBOUNDED:
        return SolveReport(UNBOUNDED, nodes=nodes)
    if not rep.ok:
        return SolveReport(rep.status, nodes=nodes)
    heap = [(rep.objective, next(counter), lb, ub, rep.x)]
    while heap:
        bound, _, nlb, nub, x = heapq.heappop(heap)
        if bound >= incumbent_obj - _gap(incumbent_obj):
            continue
        j = _most_fractional(x, binary_indices)
        if j is None:
            xr = _round_binaries(x, binary_indices)
            obj = float(p.c @ xr)
            if obj < incumbent_obj:
                incumbent, incumbent_obj = xr, obj
            continue
        for value in (0.0, 1.0):
            clb, cub = nlb.copy(), nub.copy()
            clb[j] = cub[j] = value
            child = solve_lp(p.with_bounds(clb, cub))
            nodes += 1
            if child.ok and child.objective < incumbent_obj - _gap(incumbent_obj):
                heapq.heappush(heap, (child.objective, next(counter), clb, cub, child.x))

    if incumbent is None:
        return SolveReport(INFEASIBLE, nodes=nodes)
    if lexicographic:
        incumbent, extra = _lexicographic_refine(root, binary_indices, incumbent_obj)
        nodes += extra
    return SolveReport(OPTIMAL, incumbent, float(p.c @ incumbent), {"primal": p.residual(incumbent)}, nodes)


def _gap(obj):
    return FEAS_TOL * (1.0 + abs(obj)) if np.isfinite(obj) else 0.0


def _lexicographic_refine(root: LinearProgram, binary_indices, best_obj):
    """Depth-first 0-before-1 descent over the optimal face."""
    cut_A = np.vstack([root.A_ub, root.c[None, :]])
    cut_b = np.concatenate([root.b_ub, [best_obj + _gap(best_obj)]])
    face = LinearProgram(root.c, cut_A, cut_b, root.A_eq, root.b_eq, root.lb, root.ub)
    order = [i for i in binary_indices if face.lb[i] < face.ub[i]]
    fixed = {i: face.lb[i] for i in binary_indices if face.lb[i] >= face.ub[i]}
    count = [0]

    def feasible(assign):
        lb, ub = face.lb.copy(), face.ub.copy()
        for i, v in assign.items():
            lb[i] = ub[i] = v
        count[0] += 1
        return solve_lp(face.with_bounds(lb, ub))

    def descend(pos, assign):
        if pos == len(order):
            rep = feasible(assign)
            return rep.x if rep.ok else None
        i = order[pos]
        for value in (0.0, 1.0):
            trial = dict(assign)
            trial[i] = value
            rep = feasible(trial)
            if not rep.ok:
                continue
            # shortcut: relaxation already integral on the remaining binaries
            rest = order[pos + 1:]
            if all(abs(rep.x[r]) <= INT_TOL for r in rest):
                done = dict(trial)
                done.update({r: 0.0 for r in rest})
                tail = feasible(done)
                if tail.ok:
                    return tail.x
            found = descend(pos + 1, trial)
            if found is not None:
                return found
        return None

    x = descend(0, dict(fixed))
    if x is None:
        raise RuntimeError("lexicographic refinement lost the optimal face")
    return _round_binaries(x, binary_indices), count[0]


def format_program(p: LinearProgram) -> str:
    """Plain-text dump of a program in row form (see docs/program_dump.md)."""
    lines = [f"VARIABLES {p.n}"]
    kind = "QP" if isinstance(p, QuadraticProgram) else "LP"
    lines.append(f"KIND {kind}")
    lines.append("OBJECTIVE " + " ".join(repr(float(v)) for v in p.c))
    if isinstance(p, QuadraticProgram):
        for i, j in zip(*np.nonzero(np.triu(p.Q))):
            lines.append(f"HESSIAN {i} {j} {float(p.Q[i, j])!r}")
    for row, b in zip(p.A_ub, p.b_ub):
        lines.append("LE " + _sparse_row(row) + f" : {float(b)!r}")
    for row, b in zip(p.A_eq, p.b_eq):
        lines.append("EQ " + _sparse_row(row) + f" : {float(b)!r}")
    for i, (lo, hi) in enumerate(zip(p.lb, p.ub)):
        lines.append(f"BOUND {i} {float(lo)!r} {float(hi)!r}")
    return "\n".join(lines) + "\n"


def _sparse_row(row):
    return " ".join(f"{i}:{float(row[i])!r}" for i in np.flatnonzero(row))
