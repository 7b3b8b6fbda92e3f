"""Delay-aware distributed robust MPC with disturbance feedback.

Each subsystem predicts its own state together with the (estimated) states
of its predecessors. Deviations of a predecessor from the input plan it
last communicated are bounded by per-step boxes; the local input is an
affine policy ``u = v + K du`` in those deviations, where ``K`` may only
use deviations that have been observed by the time the input is applied.
Robust constraint satisfaction is certified by a non-negative multiplier
matrix ``Z`` (linear duality for the box).

Per prediction step ``l`` the outgoing deviation bound is
``b_out[l] = Z_u[l] b_in`` and is sent to followers together with the plan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import optkernel

LOG = logging.getLogger(__name__)

REG = 1e-6


class ControlInfeasible(RuntimeError):
    pass


class MissingInputs(ValueError):
    pass


def _check_interior(C, b, what):
    """Raise unless ``C x < b`` has a solution (Chebyshev-style slack LP)."""
    n = C.shape[1]
    rep = optkernel.solve_lp(optkernel.LinearProgram(
        np.r_[np.zeros(n), -1.0], np.c_[C, np.ones(b.size)], b,
        lb=np.r_[np.full(n, -np.inf), -np.inf], ub=np.r_[np.full(n, np.inf), 1.0]))
    if not rep.ok or rep.x[-1] <= 1e-9:
        raise ValueError(f"{what} constraint set has an empty interior")


@dataclass(frozen=True)
class PlantModel:
    """``x+ = A x + B u`` with input polytope ``C_u u <= b_u``.

    Only box input sets are used by the deviation bounds, see
    :meth:`box_input`.
    """

    A: np.ndarray
    B: np.ndarray
    C_u: np.ndarray
    b_u: np.ndarray
    C_x: np.ndarray | None = None
    b_x: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError("dimension mismatch between A and B")
        C_u = np.atleast_2d(np.asarray(self.C_u, dtype=float))
        b_u = np.asarray(self.b_u, dtype=float).reshape(-1)
        if C_u.shape != (b_u.size, B.shape[1]):
            raise ValueError("input constraint dimensions do not match B")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C_u", C_u)
        object.__setattr__(self, "b_u", b_u)
        _check_interior(C_u, b_u, "input")
        if (self.C_x is None) != (self.b_x is None):
            raise ValueError("state polytope needs both C_x and b_x")
        if self.C_x is not None:
            C_x = np.atleast_2d(np.asarray(self.C_x, dtype=float))
            b_x = np.asarray(self.b_x, dtype=float).reshape(-1)
            if C_x.shape != (b_x.size, A.shape[0]):
                raise ValueError("state constraint dimensions do not match A")
            object.__setattr__(self, "C_x", C_x)
            object.__setattr__(self, "b_x", b_x)
            _check_interior(C_x, b_x, "state")

    @classmethod
    def box_input(cls, A, B, u_min, u_max, C_x=None, b_x=None):
        B = np.asarray(B, dtype=float)
        n_u = 1 if B.ndim == 1 else B.shape[1]
        u_min = np.broadcast_to(np.asarray(u_min, dtype=float), (n_u,))
        u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (n_u,))
        C_u = np.vstack([np.eye(n_u), -np.eye(n_u)])
        return cls(A, B, C_u, np.concatenate([u_max, -u_min]), C_x, b_x)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def is_box(self) -> bool:
        n = self.n_u
        return self.C_u.shape == (2 * n, n) and np.array_equal(self.C_u, np.vstack([np.eye(n), -np.eye(n)]))

    @property
    def u_max(self) -> np.ndarray:
        return self.b_u[:self.n_u]

    @property
    def u_min(self) -> np.ndarray:
        return -self.b_u[self.n_u:]

    def step(self, x, u):
        return self.A @ np.asarray(x, float) + self.B @ np.atleast_1d(np.asarray(u, float))


@dataclass
class InfoGraph:
    """Predecessor sets; followers are derived. Must be acyclic."""

    predecessors: dict

    def __post_init__(self):
        self.predecessors = {k: tuple(v) for k, v in self.predecessors.items()}
        for node, preds in list(self.predecessors.items()):
            for p in preds:
                self.predecessors.setdefault(p, ())
        self.order = self._topological_order()

    @property
    def nodes(self):
        return list(self.predecessors)

    def followers(self, node):
        return tuple(n for n, preds in self.predecessors.items() if node in preds)

    def _topological_order(self):
        indeg = {n: len(p) for n, p in self.predecessors.items()}
        ready = sorted((n for n, d in indeg.items() if d == 0), key=str)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for f in sorted(self.followers(n), key=str):
                indeg[f] -= 1
                if indeg[f] == 0:
                    ready.append(f)
        if len(order) != len(self.predecessors):
            raise ValueError("information graph has a cycle")
        return order


def estimate_state(model: PlantModel, last_known, inputs, d: int):
    """Propagate the newest exactly known state over ``d`` steps.

    ``inputs[m]`` is the input applied at step ``k - d + m``.
    """
    if d < 0:
        raise ValueError("age must be non-negative")
    inputs = [np.atleast_1d(np.asarray(u, dtype=float)) for u in inputs]
    if len(inputs) < d:
        raise MissingInputs(f"need {d} inputs, got {len(inputs)}")
    x = np.asarray(last_known, dtype=float)
    for m in range(d):
        x = model.A @ x + model.B @ inputs[m]
    return x


@dataclass
class PredecessorBlock:
    """Bookkeeping for one predecessor inside the augmented model."""

    name: object
    plant: PlantModel
    age: int
    state_slice: slice
    input_slice: slice
    delta_offset: int
    horizon: int

    @property
    def window(self) -> range:
        """Deviation steps ``r`` (relative to now) that are still uncertain."""
        return range(1 - self.age, self.horizon)

    @property
    def n_delta(self) -> int:
        return len(self.window) * self.plant.n_u


@dataclass
class AugmentedModel:
    plant: PlantModel
    preds: list
    horizon: int
    A: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    B1_tilde: np.ndarray
    B2_tilde: np.ndarray

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_up(self) -> int:
        return self.B1.shape[1]

    @property
    def n_delta(self) -> int:
        return self.B2_tilde.shape[1]

    def predict(self, x0, u, up, du=None):
        """Stacked state trajectory ``[x_0; ...; x_H]``."""
        x = self.A_tilde @ x0 + self.B_tilde @ u + self.B1_tilde @ up
        if du is not None and du.size:
            x = x + self.B2_tilde @ du
        return x


def _block_diag(*mats):
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def build_models(plant: PlantModel, predecessors, H: int, ages=None) -> AugmentedModel:
    """Augmented and horizon-stacked prediction matrices.

    ``predecessors`` is a list of ``(name, PlantModel)``; ``ages`` gives the
    information age per predecessor (default 0). The deviation vector is
    ordered predecessor-major, then by step ``r = 1 - age, ..., H - 1``.
    """
    if isinstance(predecessors, PlantModel):
        predecessors = [("pred", predecessors)]
    predecessors = list(predecessors)
    ages = [0] * len(predecessors) if ages is None else list(ages)
    if len(ages) != len(predecessors):
        raise ValueError("one age per predecessor required")
    plants = [plant] + [p for _, p in predecessors]
    A = _block_diag(*[p.A for p in plants])
    n_x = A.shape[0]
    n_u = plant.n_u
    B = np.zeros((n_x, n_u))
    B[:plant.n_x] = plant.B
    n_up = sum(p.n_u for _, p in predecessors)
    B1 = np.zeros((n_x, n_up))
    blocks = []
    xr, ur, dr = plant.n_x, 0, 0
    for (name, p), age in zip(predecessors, ages):
        if age < 0:
            raise ValueError("ages must be non-negative")
        B1[xr:xr + p.n_x, ur:ur + p.n_u] = p.B
        blk = PredecessorBlock(name, p, int(age), slice(xr, xr + p.n_x), slice(ur, ur + p.n_u), dr, H)
        blocks.append(blk)
        xr += p.n_x
        ur += p.n_u
        dr += blk.n_delta

    powers = [np.eye(n_x)]
    for _ in range(H + max(ages, default=0) + 1):
        powers.append(powers[-1] @ A)
    A_t = np.vstack(powers[:H + 1])
    B_t = np.zeros(((H + 1) * n_x, H * n_u))
    B1_t = np.zeros(((H + 1) * n_x, H * n_up))
    for l in range(1, H + 1):
        for s in range(l):
            B_t[l * n_x:(l + 1) * n_x, s * n_u:(s + 1) * n_u] = powers[l - s - 1] @ B
            B1_t[l * n_x:(l + 1) * n_x, s * n_up:(s + 1) * n_up] = powers[l - s - 1] @ B1
    B2_t = np.zeros(((H + 1) * n_x, dr))
    for blk in blocks:
        E = np.zeros((n_x, blk.plant.n_u))
        E[blk.state_slice] = blk.plant.B
        nu = blk.plant.n_u
        for idx, r in enumerate(blk.window):
            col = blk.delta_offset + idx * nu
            for l in range(0, H + 1):
                if r < l:
                    B2_t[l * n_x:(l + 1) * n_x, col:col + nu] = powers[l - r - 1] @ E
    return AugmentedModel(plant, blocks, H, A, B, B1, A_t, B_t, B1_t, B2_t)


def feedback_support(d_traj, H: int, n_u: int = 1, n_up: int = 1):
    """Allowed entries of ``K`` for one predecessor.

    Block ``(l, r)`` may be non-zero iff ``1 - d_0 <= r <= l - d_l``, where
    ``d_traj[l]`` is the predicted information age at step ``l``. Columns
    follow ``r = 1 - d_0, ..., H - 1``.
    """
    d = [int(x) for x in d_traj]
    if len(d) < H:
        raise ValueError("age trajectory shorter than the horizon")
    window = range(1 - d[0], H)
    mask = np.zeros((H * n_u, len(window) * n_up), dtype=bool)
    for l in range(H):
        for idx, r in enumerate(window):
            if r <= l - d[l]:
                mask[l * n_u:(l + 1) * n_u, idx * n_up:(idx + 1) * n_up] = True
    return mask


@dataclass
class UncertaintyBox:
    """Per-entry deviation box ``-lower <= du <= upper`` for the stacked deviation vector."""

    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        if self.upper.shape != self.lower.shape:
            raise ValueError("upper/lower bound length mismatch")
        if (self.upper + self.lower < -1e-12).any():
            raise ValueError("empty deviation box")

    @property
    def size(self) -> int:
        return self.upper.size

    @property
    def C(self) -> np.ndarray:
        """Shape matrix with rows ``+e_i, -e_i`` per entry."""
        n = self.size
        C = np.zeros((2 * n, n))
        C[0::2] = np.eye(n)
        C[1::2] = -np.eye(n)
        return C

    @property
    def b(self) -> np.ndarray:
        out = np.empty(2 * self.size)
        out[0::2] = self.upper
        out[1::2] = self.lower
        return out

    def vertices(self):
        n = self.size
        if n == 0:
            yield np.zeros(0)
            return
        for bits in range(2 ** n):
            yield np.array([self.upper[i] if (bits >> i) & 1 else -self.lower[i] for i in range(n)])


@dataclass
class StateConstraint:
    """Polytope ``C x <= b`` on the augmented state, imposed at steps ``1..H``."""

    C: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)


@dataclass
class AdmissibleSet:
    """Data of the robust admissible set.

    Rows are ``[state rows for l = 1..H; input rows for l = 0..H-1]``.
    """

    model: AugmentedModel
    box: UncertaintyBox
    support: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    F3: np.ndarray
    F4: np.ndarray
    F5: np.ndarray
    rhs: np.ndarray
    input_rows: slice
    x0: np.ndarray
    peer_traj: np.ndarray
    state_con: StateConstraint | None = None

    @property
    def m(self) -> int:
        return self.F2.shape[0]


def _input_bounds(plant: PlantModel, H: int, tightened=None):
    b = np.tile(plant.b_u, H)
    if tightened is not None:
        b = np.minimum(b, np.asarray(tightened, dtype=float))
    return b


def build_admissible_set(model: AugmentedModel, box: UncertaintyBox, peer_traj, x0,
                         state_con: StateConstraint | None, support=None, input_bounds=None) -> AdmissibleSet:
    """Stack the constraints and collect them as ``F1 .. F5``.

    ``input_bounds`` optionally overrides the stacked input right-hand side
    (used to keep the current input inside the previously communicated set).
    """
    H, n_x, n_u = model.horizon, model.n_x, model.n_u
    peer_traj = np.asarray(peer_traj, dtype=float).reshape(-1)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if peer_traj.size != H * model.n_up or x0.size != n_x:
        raise ValueError("dimension mismatch in peer trajectory or initial state")
    if box.size != model.n_delta:
        raise ValueError("deviation box does not match the deviation window")
    if state_con is None:
        state_con = StateConstraint(np.zeros((0, n_x)), np.zeros(0))
    if state_con.C.shape[1] != n_x:
        raise ValueError("state constraint dimension mismatch")
    mx = state_con.C.shape[0]
    Cx_t = np.zeros((H * mx, (H + 1) * n_x))
    for l in range(1, H + 1):
        Cx_t[(l - 1) * mx:l * mx, l * n_x:(l + 1) * n_x] = state_con.C
    bx_t = np.tile(state_con.b, H)
    Cu_t = np.kron(np.eye(H), model.plant.C_u)
    bu_t = _input_bounds(model.plant, H) if input_bounds is None else np.asarray(input_bounds, float)
    mu = Cu_t.shape[0]
    F1 = np.vstack([Cx_t @ model.A_tilde, np.zeros((mu, n_x))])
    F2 = np.vstack([Cx_t @ model.B_tilde, Cu_t])
    F3 = np.vstack([Cx_t @ model.B1_tilde, np.zeros((mu, model.n_up * H))])
    F4 = np.vstack([Cx_t @ model.B2_tilde, np.zeros((mu, model.n_delta))])
    F5 = np.concatenate([bx_t, bu_t])
    rhs = F5 - F1 @ x0 - F3 @ peer_traj
    if support is None:
        support = np.zeros((H * n_u, model.n_delta), dtype=bool)
    return AdmissibleSet(model, box, np.asarray(support, bool), F1, F2, F3, F4, F5, rhs,
                         slice(H * mx, H * mx + mu), x0, peer_traj, state_con)


@dataclass
class _Layout:
    nv: int
    k_idx: np.ndarray
    z_idx: np.ndarray
    n: int


def _layout(adm: AdmissibleSet):
    nv = adm.F2.shape[1]
    k_pos = np.argwhere(adm.support)
    # structural pattern of F2 K + F4
    pattern = (np.abs(adm.F4) > 0) | ((np.abs(adm.F2) > 0).astype(int) @ adm.support.astype(int) > 0)
    z_pos = np.argwhere(pattern)
    n = nv + len(k_pos) + 2 * len(z_pos)
    return _Layout(nv, k_pos, z_pos, n), pattern


def _constraint_matrices(adm: AdmissibleSet, lay: _Layout):
    """Equalities ``Z C_delta = F2 K + F4`` and robust inequalities."""
    m = adm.m
    nK = len(lay.k_idx)
    nZ = len(lay.z_idx)
    off_k = lay.nv
    off_zp = off_k + nK
    off_zm = off_zp + nZ
    b_in = adm.box.b
    ub_in, lb_in = b_in[0::2], b_in[1::2]

    k_lookup = {}
    for idx, (row, col) in enumerate(lay.k_idx):
        k_lookup.setdefault(col, []).append((row, idx))
    A_eq = np.zeros((nZ, lay.n))
    b_eq = np.zeros(nZ)
    for zi, (i, e) in enumerate(lay.z_idx):
        A_eq[zi, off_zp + zi] = 1.0
        A_eq[zi, off_zm + zi] = -1.0
        for row, kidx in k_lookup.get(e, ()):
            if adm.F2[i, row] != 0.0:
                A_eq[zi, off_k + kidx] = -adm.F2[i, row]
        b_eq[zi] = adm.F4[i, e]

    A_ub = np.zeros((m, lay.n))
    A_ub[:, :lay.nv] = adm.F2
    for zi, (i, e) in enumerate(lay.z_idx):
        A_ub[i, off_zp + zi] = ub_in[e]
        A_ub[i, off_zm + zi] = lb_in[e]
    lb = np.full(lay.n, -np.inf)
    lb[off_zp:] = 0.0
    return A_ub, adm.rhs.copy(), A_eq, b_eq, lb


def unpack(adm: AdmissibleSet, lay: _Layout, x):
    H_nu = adm.F2.shape[1]
    v = x[:lay.nv]
    K = np.zeros((H_nu, adm.model.n_delta))
    nK = len(lay.k_idx)
    for idx, (r, c) in enumerate(lay.k_idx):
        K[r, c] = x[lay.nv + idx]
    Z = np.zeros((adm.m, 2 * adm.model.n_delta))
    nZ = len(lay.z_idx)
    zp = x[lay.nv + nK:lay.nv + nK + nZ]
    zm = x[lay.nv + nK + nZ:]
    for zi, (i, e) in enumerate(lay.z_idx):
        Z[i, 2 * e] = max(zp[zi], 0.0)
        Z[i, 2 * e + 1] = max(zm[zi], 0.0)
    return v, K, Z


@dataclass
class Weights:
    Q_x: np.ndarray
    Q_u: np.ndarray
    Q_T: np.ndarray

    def __post_init__(self):
        self.Q_x = np.atleast_2d(np.asarray(self.Q_x, float))
        self.Q_u = np.atleast_2d(np.asarray(self.Q_u, float))
        self.Q_T = np.atleast_2d(np.asarray(self.Q_T, float))


@dataclass
class FeedbackPolicy:
    v: np.ndarray
    K: np.ndarray
    Z: np.ndarray
    cost: float = 0.0
    b_out: np.ndarray | None = None

    def inputs(self, du):
        du = np.asarray(du, dtype=float).reshape(-1)
        return self.v + (self.K @ du if du.size else 0.0)


def stage1_cost_terms(model: AugmentedModel, weights: Weights, x0, peer_traj):
    """Hessian / linear term / constant of J1 as a function of the nominal input."""
    H, n_u = model.horizon, model.n_u
    Qbar = _block_diag(*([weights.Q_x] * H + [weights.Q_T]))
    nup = model.n_up
    Quu = weights.Q_u[:n_u, :n_u]
    Qup = weights.Q_u[:n_u, n_u:]
    Qpp = weights.Q_u[n_u:, n_u:]
    free = model.A_tilde @ x0 + model.B1_tilde @ peer_traj
    Bt = model.B_tilde
    P = 2.0 * (Bt.T @ Qbar @ Bt + np.kron(np.eye(H), Quu))
    up = peer_traj.reshape(H, nup) if nup else np.zeros((H, 0))
    lin_u = np.concatenate([2.0 * Qup @ up[l] for l in range(H)]) if nup else np.zeros(H * n_u)
    c = 2.0 * Bt.T @ Qbar @ free + lin_u
    const = float(free @ Qbar @ free) + (sum(float(up[l] @ Qpp @ up[l]) for l in range(H)) if nup else 0.0)
    return P, c, const


def solve_stage1(adm: AdmissibleSet, weights: Weights) -> FeedbackPolicy:
    """Minimise the nominal cost over policies in the admissible set."""
    lay, _ = _layout(adm)
    A_ub, b_ub, A_eq, b_eq, lb = _constraint_matrices(adm, lay)
    P_v, c_v, const = stage1_cost_terms(adm.model, weights, adm.x0, adm.peer_traj)
    P = np.zeros((lay.n, lay.n))
    P[:lay.nv, :lay.nv] = P_v
    P[lay.nv:, lay.nv:] = 2.0 * REG * np.eye(lay.n - lay.nv)
    c = np.zeros(lay.n)
    c[:lay.nv] = c_v
    qp = optkernel.QuadraticProgram(c, A_ub, b_ub, A_eq, b_eq, lb=lb, Q=P)
    rep = optkernel.solve_qp(qp)
    if not rep.ok:
        raise ControlInfeasible(f"stage 1 is {rep.status}")
    v, K, Z = unpack(adm, lay, rep.x)
    cost = float(0.5 * v @ P_v @ v + c_v @ v + const)
    return FeedbackPolicy(v, K, Z, cost)


def outgoing_bounds(adm: AdmissibleSet, Z) -> np.ndarray:
    """``Z_u b_in`` reshaped to ``(H, rows of C_u)``."""
    Zu = Z[adm.input_rows]
    H = adm.model.horizon
    return (Zu @ adm.box.b).reshape(H, -1)


def solve_stage2(adm: AdmissibleSet, v_star, f1_targets, f2_steps) -> FeedbackPolicy:
    """Re-optimise ``K`` and ``Z`` with the nominal input frozen.

    ``f1_targets`` maps prediction step ``l`` to a list of incoming bound
    vectors the outgoing bound should match; ``f2_steps`` lists the steps
    whose outgoing bound is driven towards zero.
    """
    H = adm.model.horizon
    if any(not 0 <= l < H for l in list(f1_targets) + list(f2_steps)):
        raise ValueError("stage-2 cost refers to a step outside the horizon")
    lay, _ = _layout(adm)
    A_ub, b_ub, A_eq, b_eq, lb = _constraint_matrices(adm, lay)
    v_star = np.asarray(v_star, dtype=float)
    b_ub = b_ub - A_ub[:, :lay.nv] @ v_star
    b_ub = b_ub + 1e-9 * (1.0 + np.abs(b_ub))
    A_ub = A_ub[:, lay.nv:]
    A_eq = A_eq[:, lay.nv:]
    lb = lb[lay.nv:]
    n = lay.n - lay.nv
    nK = len(lay.k_idx)
    nZ = len(lay.z_idx)
    rows_u = adm.model.plant.C_u.shape[0]
    b_in = adm.box.b
    ub_in, lb_in = b_in[0::2], b_in[1::2]
    # G maps decision vector to stacked outgoing bounds
    G = np.zeros((H * rows_u, n))
    base = adm.input_rows.start
    for zi, (i, e) in enumerate(lay.z_idx):
        if adm.input_rows.start <= i < adm.input_rows.stop:
            G[i - base, nK + zi] = ub_in[e]
            G[i - base, nK + nZ + zi] = lb_in[e]
    # tie-break on K and the input-row multipliers only; the state-row
    # multipliers do not influence anything that leaves this subsystem
    reg = np.ones(n)
    for zi, (i, e) in enumerate(lay.z_idx):
        if not adm.input_rows.start <= i < adm.input_rows.stop:
            reg[nK + zi] = reg[nK + nZ + zi] = 0.0
    P = 2.0 * REG * np.diag(reg)
    c = np.zeros(n)
    for l, targets in f1_targets.items():
        g = G[l * rows_u:(l + 1) * rows_u]
        for t in targets:
            P += 2.0 * g.T @ g
            c += -2.0 * g.T @ np.asarray(t, float)
    for l in f2_steps:
        g = G[l * rows_u:(l + 1) * rows_u]
        P += 2.0 * g.T @ g
    qp = optkernel.QuadraticProgram(c, A_ub, b_ub, A_eq, b_eq, lb=lb, Q=P)
    rep = optkernel.solve_qp(qp)
    if not rep.ok:
        raise ControlInfeasible(f"stage 2 is {rep.status}")
    x = np.concatenate([v_star, rep.x])
    v, K, Z = unpack(adm, lay, x)
    J2 = 0.0
    bo = outgoing_bounds(adm, Z)
    for l, targets in f1_targets.items():
        for t in targets:
            J2 += float(np.sum((np.asarray(t) - bo[l]) ** 2))
    for l in f2_steps:
        J2 += float(np.sum(bo[l] ** 2))
    return FeedbackPolicy(v_star.copy(), K, Z, J2, bo)


@dataclass(frozen=True)
class PeerMessage:
    sender: object
    sent_at: int
    state: np.ndarray
    plan: np.ndarray
    bounds: np.ndarray

    def planned_input(self, step: int, n_u: int):
        """Planned input for absolute ``step``; the last planned value is held beyond the plan."""
        H = self.plan.size // n_u
        idx = min(max(step - self.sent_at, 0), H - 1)
        return self.plan[idx * n_u:(idx + 1) * n_u]

    def bound(self, step: int):
        """Communicated deviation bound for ``step`` or ``None`` beyond the plan."""
        idx = step - self.sent_at
        if 0 <= idx < self.bounds.shape[0]:
            return self.bounds[idx]
        return None


@dataclass
class DelayState:
    """Delay information one subsystem holds at one step.

    ``ages[j]`` is the age of the newest message from predecessor ``j``;
    ``age_forecast[j][l]`` the predicted age ``l`` steps ahead (entry 0 is
    the current age); ``out_delay`` the largest forecast delay towards any
    follower (``0`` for leaves).
    """

    ages: dict = field(default_factory=dict)
    age_forecast: dict = field(default_factory=dict)
    out_delay: int = 0
    sender_delays: dict = field(default_factory=dict)


def predecessor_view(msg: PeerMessage, plant: PlantModel, now: int, H: int, tail_bound):
    """Estimated current state, planned inputs and deviation box of one predecessor.

    Deviation bounds for steps past the predecessor's communicated plan fall
    back to ``tail_bound`` (``[upper; lower]``).
    """
    d = now - msg.sent_at
    if d < 0:
        raise ValueError("message from the future")
    n_u = plant.n_u
    past = [msg.planned_input(msg.sent_at + m, n_u) for m in range(d)]
    x_est = estimate_state(plant, msg.state, past, d)
    plan = np.concatenate([msg.planned_input(now + l, n_u) for l in range(H)])
    tail = np.asarray(tail_bound, dtype=float).reshape(-1)
    upper, lower = [], []
    for r in range(1 - d, H):
        b = msg.bound(now + r)
        if b is None:
            b = tail
        upper.append(b[:n_u])
        lower.append(b[n_u:])
    upper = np.concatenate(upper) if upper else np.zeros(0)
    lower = np.concatenate(lower) if lower else np.zeros(0)
    return x_est, plan, upper, lower, d


def augmented_constraint(model: AugmentedModel, coupling: StateConstraint | None) -> StateConstraint:
    """Coupling constraint plus every plant's own state polytope, on the augmented state."""
    rows, rhs = [], []
    if coupling is not None and coupling.C.size:
        rows.append(coupling.C)
        rhs.append(coupling.b)
    blocks = [(slice(0, model.plant.n_x), model.plant)] + [(b.state_slice, b.plant) for b in model.preds]
    for sl, plant in blocks[:1]:
        if plant.C_x is not None:
            C = np.zeros((plant.C_x.shape[0], model.n_x))
            C[:, sl] = plant.C_x
            rows.append(C)
            rhs.append(plant.b_x)
    if not rows:
        return StateConstraint(np.zeros((0, model.n_x)), np.zeros(0))
    return StateConstraint(np.vstack(rows), np.concatenate(rhs))


def containment_bounds(plant: PlantModel, previous: PeerMessage | None, k: int, H: int, levels: int):
    """Stacked input right-hand side, tightened to the previous message's intervals.

    The first ``levels`` prediction steps are intersected with the interval
    ``plan +- bound`` the previous message promised for the same absolute
    step. ``levels = 0`` returns the plain input bounds.
    """
    bu = _input_bounds(plant, H)
    if previous is None or levels <= 0:
        return bu
    if not plant.is_box:
        raise ValueError("containment requires a box input set")
    nu = plant.n_u
    rows = 2 * nu
    for l in range(min(levels, H)):
        b = previous.bound(k + l)
        if b is None:
            break
        planned = previous.planned_input(k + l, nu)
        seg = bu[l * rows:(l + 1) * rows]
        seg[:nu] = np.minimum(seg[:nu], planned + b[:nu])
        seg[nu:] = np.minimum(seg[nu:], -(planned - b[nu:]))
    return bu


@dataclass
class StepResult:
    u: np.ndarray
    message: PeerMessage
    stage1: FeedbackPolicy
    stage2: FeedbackPolicy
    ages: list
    x0: np.ndarray
    peer: np.ndarray
    box: UncertaintyBox
    admissible: AdmissibleSet
    containment: str


@dataclass
class LocalController:
    """One subsystem's delay-aware robust MPC.

    ``predecessors`` lists ``(name, PlantModel)``; ``tail_bounds[name]`` is
    the deviation box assumed for a predecessor's steps past its
    communicated plan. With ``tighten=False`` the second stage only balances
    incoming and outgoing bounds (no shrinking towards the followers).
    """

    name: object
    plant: PlantModel
    predecessors: list
    weights: Weights
    horizon: int
    coupling: StateConstraint | None = None
    tail_bounds: dict = field(default_factory=dict)
    tighten: bool = True
    containment_levels: int = 1
    previous: PeerMessage | None = None

    def step(self, k: int, x_own, inbox: dict, delays: DelayState) -> StepResult:
        """Solve both stages for step ``k``.

        ``inbox`` maps every predecessor name to its newest arrived message.
        """
        H = self.horizon
        x_own = np.asarray(x_own, dtype=float)
        views = []
        for name, plant in self.predecessors:
            if name not in inbox:
                raise MissingInputs(f"{self.name}: no message from predecessor {name}")
            views.append(predecessor_view(inbox[name], plant, k, H, self.tail_bounds[name]))
        ages = [v[4] for v in views]
        model = build_models(self.plant, self.predecessors, H, ages)
        x0 = np.concatenate([x_own] + [v[0] for v in views])
        if views:
            per_step = [np.concatenate([v[1][l * p.n_u:(l + 1) * p.n_u] for v, (_, p) in zip(views, self.predecessors)])
                        for l in range(H)]
            peer = np.concatenate(per_step)
        else:
            peer = np.zeros(0)
        box = UncertaintyBox(np.concatenate([v[2] for v in views]) if views else np.zeros(0),
                             np.concatenate([v[3] for v in views]) if views else np.zeros(0))

        support = np.zeros((H * self.plant.n_u, model.n_delta), dtype=bool)
        for blk, (name, plant) in zip(model.preds, self.predecessors):
            support[:, blk.delta_offset:blk.delta_offset + blk.n_delta] = feedback_support(
                self.age_trajectory(blk.age, delays.age_forecast.get(name)), H, self.plant.n_u, plant.n_u)
        con = augmented_constraint(model, self.coupling)

        pol1 = adm = None
        for levels, label in ((self.containment_levels, "nested" if self.containment_levels > 1 else "first-step"), (0, "released")):
            bu = containment_bounds(self.plant, self.previous, k, H, levels)
            adm = build_admissible_set(model, box, peer, x0, con, support, bu)
            try:
                pol1 = solve_stage1(adm, self.weights)
                break
            except ControlInfeasible:
                if levels == 0:
                    raise
                LOG.info("%s k=%d: containment level '%s' infeasible, relaxing", self.name, k, label)

        f1 = {}
        for blk in model.preds:
            if blk.plant.n_u != self.plant.n_u:
                continue
            nu = blk.plant.n_u
            for l in range(1, H - blk.age):
                pos = blk.delta_offset + (l - (1 - blk.age)) * nu
                f1.setdefault(l, []).append(np.concatenate([box.upper[pos:pos + nu], box.lower[pos:pos + nu]]))
        f2 = list(range(0, min(delays.out_delay, H - 1) + 1)) if self.tighten else []
        pol2 = solve_stage2(adm, pol1.v, f1, f2)
        u = applied_input(pol2, self.plant.n_u)
        msg = PeerMessage(self.name, k, x_own.copy(), pol1.v.copy(), pol2.b_out.copy())
        self.previous = msg
        return StepResult(u, msg, pol1, pol2, ages, x0, peer, box, adm, label)

    def age_trajectory(self, age: int, forecast) -> list:
        """Predicted ages over the horizon; an age can grow by at most one per step."""
        H = self.horizon
        if forecast is None:
            return [age + l for l in range(H)]
        out = [age]
        for l in range(1, H):
            val = int(forecast[l]) if l < len(forecast) else out[-1] + 1
            out.append(min(max(val, 0), out[-1] + 1))
        return out


def applied_input(policy: FeedbackPolicy, n_u: int) -> np.ndarray:
    """First input block; the first row of ``K`` is structurally empty."""
    u = policy.v[:n_u].copy()
    if np.any(policy.K[:n_u] != 0.0):
        raise AssertionError("current-step feedback must be empty")
    return u


def realized_trajectory(adm: AdmissibleSet, policy: FeedbackPolicy, du):
    """States and inputs produced by ``policy`` for deviation ``du``."""
    du = np.asarray(du, dtype=float).reshape(-1)
    u = policy.inputs(du)
    x = adm.model.predict(adm.x0, u, adm.peer_traj, du)
    return x, u


def constraint_violation(adm: AdmissibleSet, policy: FeedbackPolicy, du) -> float:
    """Largest violation of the raw state/input polytopes along the realized trajectory."""
    x, u = realized_trajectory(adm, policy, du)
    H, n_x = adm.model.horizon, adm.model.n_x
    worst = 0.0
    con = adm.state_con
    for l in range(1, H + 1):
        if con.C.size:
            worst = max(worst, float(np.max(con.C @ x[l * n_x:(l + 1) * n_x] - con.b)))
    C_u = adm.model.plant.C_u
    bu = adm.F5[adm.input_rows].reshape(H, -1)
    n_u = adm.model.n_u
    for l in range(H):
        worst = max(worst, float(np.max(C_u @ u[l * n_u:(l + 1) * n_u] - bu[l])))
    return worst
