"""Random problem generators shared by the property and acceptance tests."""

from __future__ import annotations

import numpy as np

from delaycosim import dmpc
from delaycosim.forecast import UNREACHABLE, RepetitionProfile
from delaycosim.netmodel import LinkSpec, NetworkTopology, create_request
from delaycosim.rpnc import RpncProblem


def random_topology(rng, n_q, n_v):
    links = []
    for j in range(n_v):
        s, t = rng.choice(n_q, 2, replace=False)
        links.append(LinkSpec(j, int(s), int(t)))
    n_c = int(rng.integers(1, n_v + 1))
    C = np.zeros((n_c, n_v), dtype=int)
    for j in range(n_v):
        C[rng.integers(n_c), j] = 1
    for g in range(n_c):
        if not C[g].any():
            C[g, rng.integers(n_v)] = 1
    if rng.random() < 0.3 and n_c > 1:
        C[0, rng.integers(n_v)] = 1
    return NetworkTopology(n_q, tuple(links), C)


def random_rpnc_problem(rng, max_binaries=12):
    """A fresh-flight scheduling problem with at most ``max_binaries`` decision variables."""
    while True:
        n_q = int(rng.integers(2, 5))
        n_v = int(rng.integers(1, 5))
        H = int(rng.integers(1, 5))
        F = int(rng.integers(1, 3))
        if H * n_v * F <= max_binaries:
            break
    topo = random_topology(rng, n_q, n_v)
    reps = rng.integers(1, 4, (H, n_v))
    reps[rng.random((H, n_v)) < 0.1] = UNREACHABLE
    flights = []
    for f in range(F):
        o, d = rng.choice(n_q, 2, replace=False)
        flights.append(create_request(topo, int(o), int(d), 0, flight_id=f))
    return RpncProblem(topo, flights, H, RepetitionProfile(reps.astype(np.int64)))


def random_plant(rng, n_x, n_u=1, u_max=2.0):
    A = np.eye(n_x) + 0.2 * rng.standard_normal((n_x, n_x))
    A *= min(1.0, 1.05 / max(np.abs(np.linalg.eigvals(A))))
    B = 0.5 * rng.standard_normal((n_x, n_u))
    return dmpc.PlantModel.box_input(A, B, -u_max, u_max)


def random_age_trajectory(rng, H, d0):
    out = [d0]
    for _ in range(1, H):
        out.append(int(rng.integers(0, out[-1] + 2)))
    return out


def random_dmpc_instance(rng, max_h=4, max_preds=2):
    """Plant, predecessors, box, constraints and weights of a small robust MPC problem.

    The caller should treat :class:`dmpc.ControlInfeasible` as "draw again".
    """
    H = int(rng.integers(1, max_h + 1))
    n_x = int(rng.integers(1, 3))
    plant = random_plant(rng, n_x)
    n_p = int(rng.integers(1, max_preds + 1))
    preds = [(f"p{i}", random_plant(rng, n_x)) for i in range(n_p)]
    ages = [int(rng.integers(0, 3)) for _ in range(n_p)]
    model = dmpc.build_models(plant, preds, H, ages)
    support = np.zeros((H * plant.n_u, model.n_delta), dtype=bool)
    for blk, (_, p) in zip(model.preds, preds):
        traj = random_age_trajectory(rng, H, blk.age)
        support[:, blk.delta_offset:blk.delta_offset + blk.n_delta] = dmpc.feedback_support(traj, H, plant.n_u, p.n_u)
    upper = rng.uniform(0.0, 0.3, model.n_delta)
    lower = rng.uniform(0.0, 0.3, model.n_delta)
    box = dmpc.UncertaintyBox(upper, lower)
    # |x_own - x_pred| <= 3 per predecessor and |x_own| <= 5
    rows, rhs = [], []
    total = model.n_x
    for blk in model.preds:
        D = np.zeros((n_x, total))
        D[:, :n_x] = np.eye(n_x)
        D[:, blk.state_slice] = -np.eye(n_x)
        rows += [D, -D]
        rhs += [np.full(n_x, 3.0)] * 2
    E = np.zeros((n_x, total))
    E[:, :n_x] = np.eye(n_x)
    rows += [E, -E]
    rhs += [np.full(n_x, 5.0)] * 2
    con = dmpc.StateConstraint(np.vstack(rows), np.concatenate(rhs))
    x0 = rng.uniform(-0.5, 0.5, model.n_x)
    peer = rng.uniform(-1.0, 1.0, H * model.n_up)
    adm = dmpc.build_admissible_set(model, box, peer, x0, con, support)
    Qx = np.eye(model.n_x)
    weights = dmpc.Weights(Qx, 0.1 * np.eye(plant.n_u + model.n_up), Qx)
    return adm, weights


def random_binary_program(rng, n, m):
    c = rng.integers(-5, 6, n).astype(float)
    A = rng.integers(-3, 4, (m, n)).astype(float)
    b = rng.integers(0, 6, m).astype(float)
    return c, A, b


def solved_instance(seed, max_h=3):
    rng = np.random.default_rng(seed)
    while True:
        adm, weights = random_dmpc_instance(rng, max_h=max_h)
        try:
            pol1 = dmpc.solve_stage1(adm, weights)
        except dmpc.ControlInfeasible:
            continue
        f1 = {l: [np.r_[adm.box.upper[:1], adm.box.lower[:1]]] for l in range(1, adm.model.horizon)}
        pol2 = dmpc.solve_stage2(adm, pol1.v, f1, [l for l in (0, 1) if l < adm.model.horizon])
        return adm, pol1, pol2
