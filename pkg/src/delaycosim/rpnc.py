"""Reliable predictive network control.

Every step the controller stacks the queue subsystems of all packets in
flight, plans link activations over ``H`` steps as a binary program, and
promises each packet an arrival step. Only the first block of the plan is
applied; repetitions of a started transmission are implicit.

Decision vector layout: ``x[k * F * n_v + f * n_v + j]`` is the start of a
reliable transmission of flight ``f`` over link ``j``, ``k`` steps ahead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import optkernel
from .forecast import UNREACHABLE, RepetitionProfile, build_gamma
from .netmodel import (
    Delivery,
    NetworkState,
    NetworkTopology,
    PacketFlight,
    Transmission,
    create_request,
    sample_and_advance,
    step_flight,
)

LOG = logging.getLogger(__name__)


class SchedulerInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class LedgerEntry:
    promised: int
    made_at: int
    elapsed: int = 0
    active: bool = True

    @property
    def remaining(self) -> int:
        return self.promised - self.elapsed

    @property
    def absolute(self) -> int:
        return self.made_at + self.promised


@dataclass(frozen=True)
class Committed:
    """A transmission started before the current optimisation (relative start < 0)."""

    link: int
    start: int
    repetitions: int

    @property
    def completes(self) -> int:
        return self.start + self.repetitions


@dataclass
class RpncProblem:
    topology: NetworkTopology
    flights: list
    horizon: int
    profile: RepetitionProfile
    committed: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    relaxed: bool = False
    gammas: list = field(init=False)

    def __post_init__(self):
        self.gammas = [build_gamma(self.profile, kappa) for kappa in range(self.horizon + 1)]

    @property
    def n_v(self) -> int:
        return self.topology.n_v

    @property
    def size(self) -> int:
        return self.horizon * len(self.flights) * self.n_v

    def index(self, k: int, f: int, j: int) -> int:
        return (k * len(self.flights) + f) * self.n_v + j

    def flight_columns(self, f: int) -> np.ndarray:
        """Positions of flight ``f``'s ``H * n_v`` block inside the stacked vector."""
        return np.array([self.index(k, f, j) for k in range(self.horizon) for j in range(self.n_v)], dtype=int)


def cost_diagonal(topology: NetworkTopology, flight: PacketFlight) -> np.ndarray:
    """Queue cost weights: 1 everywhere except the destination."""
    q = np.ones(topology.n_q)
    q[flight.destination] = 0.0
    return q


def predicted_base(topology: NetworkTopology, flight: PacketFlight, committed: Committed | None, kappa: int):
    """Queue at ``kappa`` if nothing new is scheduled (committed moves included)."""
    q = flight.queue.astype(float).copy()
    if committed is not None and kappa - committed.completes >= 0:
        q = q + topology.routing[:, committed.link]
    return q


def processable_base(topology: NetworkTopology, flight: PacketFlight, committed: Committed | None, kappa: int,
                     relaxed: bool = False):
    """Right-hand side of the processability rows: committed departures count immediately."""
    q = flight.queue.astype(float).copy()
    if committed is not None:
        col = topology.routing[:, committed.link]
        q = q + np.minimum(col, 0)
        if relaxed or kappa - committed.completes >= 0:
            q = q + np.maximum(col, 0)
    return q


def predict_queues(topology: NetworkTopology, flight: PacketFlight, gammas, v_traj, committed=None):
    """Deterministic queue prediction ``q_kappa`` for ``kappa = 1..H`` under one flight's plan."""
    H = len(gammas) - 1
    R = topology.routing
    v = np.asarray(v_traj, dtype=float)
    block = np.tile(R, (1, H))
    out = []
    for kappa in range(1, H + 1):
        q = predicted_base(topology, flight, committed, kappa) + block @ (gammas[kappa] * v)
        out.append(q)
    return np.array(out)


def _useful_links(topology: NetworkTopology, flight: PacketFlight, start_at: int):
    """Links that lie on some path from ``start_at`` to the flight's destination."""
    fwd = {start_at}
    frontier = [start_at]
    while frontier:
        node = frontier.pop()
        for link in topology.links:
            if link.from_entity == node and link.to_entity not in fwd:
                fwd.add(link.to_entity)
                frontier.append(link.to_entity)
    back = {flight.destination}
    frontier = [flight.destination]
    while frontier:
        node = frontier.pop()
        for link in topology.links:
            if link.to_entity == node and link.from_entity is not None and link.from_entity not in back:
                back.add(link.from_entity)
                frontier.append(link.from_entity)
    return {link.link_id for link in topology.links
            if link.from_entity is not None and link.from_entity in fwd and link.to_entity in back
            and link.from_entity != flight.destination}


def variable_bounds(problem: RpncProblem):
    """Upper bounds: 0 for unreachable, injection, useless or occupied positions."""
    H, topo = problem.horizon, problem.topology
    ub = np.zeros(problem.size)
    busy = _occupied_groups(problem)
    for f, flight in enumerate(problem.flights):
        com = problem.committed.get(flight.flight_id)
        if flight.arrived:
            continue
        start_at = flight.location if com is None else topo.links[com.link].to_entity
        useful = _useful_links(topo, flight, start_at)
        for k in range(H):
            for j in useful:
                if problem.profile.reps[k, j] >= UNREACHABLE:
                    continue
                groups = np.flatnonzero(topo.constituency[:, j])
                if any(busy[k, g] for g in groups):
                    continue
                ub[problem.index(k, f, j)] = 1.0
    return np.zeros(problem.size), ub


def _occupied_groups(problem: RpncProblem):
    topo = problem.topology
    busy = np.zeros((problem.horizon, topo.n_c), dtype=bool)
    for com in problem.committed.values():
        groups = np.flatnonzero(topo.constituency[:, com.link])
        for k in range(0, min(com.completes, problem.horizon)):
            busy[k, groups] = True
    return busy


def assemble_constituency(topology: NetworkTopology, H: int, flights: int = 1):
    """``[I_H kron C_stacked] x <= 1`` with flights sharing every group."""
    C = np.tile(topology.constituency, (1, flights))
    A = np.kron(np.eye(H), C)
    return A, np.ones(A.shape[0])


def assemble_reliability(profile: RepetitionProfile, topology: NetworkTopology, H: int, flights: int = 1):
    """Occupation rows: starting link ``j`` at ``kappa`` blocks its groups for ``r - 1`` steps.

    One row per (flight, link, start, group, offset ``m``):
    ``x[kappa, f, j] + sum_f' c_g . x[kappa + m, f'] <= 1``.
    """
    n_v = topology.n_v
    width = flights * n_v
    rows = []
    for f in range(flights):
        for j in range(n_v):
            for kappa in range(H):
                r = int(profile.reps[kappa, j])
                if r >= UNREACHABLE or r <= 1:
                    continue
                for g in np.flatnonzero(topology.constituency[:, j]):
                    for m in range(1, min(r - 1, H - 1 - kappa) + 1):
                        row = np.zeros(H * width)
                        row[kappa * width + f * n_v + j] = 1.0
                        sl = slice((kappa + m) * width, (kappa + m + 1) * width)
                        row[sl] += np.tile(topology.constituency[g], flights)
                        rows.append(row)
    if not rows:
        return np.zeros((0, H * width)), np.zeros(0)
    A = np.array(rows)
    return A, np.ones(A.shape[0])


def assemble_consistency(problem: RpncProblem, f: int):
    """Row forcing flight ``f`` to its destination no later than its standing promise.

    Returns ``None`` when the flight has no active promise within the horizon.
    """
    flight = problem.flights[f]
    entry = problem.ledger.get(flight.flight_id)
    if entry is None or not entry.active:
        return None
    a = entry.remaining
    if a < 0 or a > problem.horizon:
        return None
    R = problem.topology.routing
    H = problem.horizon
    row = np.zeros(problem.size)
    dest_row = np.tile(R[flight.destination], H) * problem.gammas[a]
    row[problem.flight_columns(f)] = -dest_row
    com = problem.committed.get(flight.flight_id)
    rhs = -1.0 + predicted_base(problem.topology, flight, com, a)[flight.destination]
    return row, rhs


def assemble_processability(problem: RpncProblem, f: int):
    """Queues stay non-negative and a packet cannot hop twice before it arrives."""
    flight = problem.flights[f]
    R = problem.topology.routing
    Rm = np.minimum(R, 0)
    Rp = np.maximum(R, 0)
    H, n_v = problem.horizon, problem.n_v
    cols = problem.flight_columns(f)
    com = problem.committed.get(flight.flight_id)
    A, b = [], []
    for kappa in range(1, H + 1):
        blk = np.zeros((problem.topology.n_q, H * n_v))
        for k in range(kappa):
            blk[:, k * n_v:(k + 1) * n_v] += Rm
        if problem.relaxed:
            gamma_term = np.zeros(H * n_v)
        else:
            gamma_term = problem.gammas[kappa - 1]
        blk += np.tile(Rp, (1, H)) * gamma_term
        rows = np.zeros((problem.topology.n_q, problem.size))
        rows[:, cols] = -blk
        A.append(rows)
        b.append(processable_base(problem.topology, flight, com, kappa - 1, problem.relaxed))
    return np.vstack(A), np.concatenate(b)


def objective(problem: RpncProblem):
    """Linear form of the waiting-time cost: ``c . x + const``."""
    c = np.zeros(problem.size)
    const = 0.0
    H = problem.horizon
    R = problem.topology.routing
    for f, flight in enumerate(problem.flights):
        com = problem.committed.get(flight.flight_id)
        qd = cost_diagonal(problem.topology, flight)
        for kappa in range(1, H + 1):
            base = predicted_base(problem.topology, flight, com, kappa)
            const += float(qd @ base)
            # qd . (R Gamma x) for this kappa
            coeff = np.tile(qd @ R, H) * problem.gammas[kappa]
            c[problem.flight_columns(f)] += coeff
    return c, const


def build_program(problem: RpncProblem, active_consistency=None) -> optkernel.LinearProgram:
    F = len(problem.flights)
    H = problem.horizon
    blocks_A, blocks_b = [], []
    A, b = assemble_constituency(problem.topology, H, F)
    blocks_A.append(A)
    blocks_b.append(b)
    A, b = assemble_reliability(problem.profile, problem.topology, H, F)
    blocks_A.append(A)
    blocks_b.append(b)
    for f in range(F):
        A, b = assemble_processability(problem, f)
        blocks_A.append(A)
        blocks_b.append(b)
        if active_consistency is None or problem.flights[f].flight_id in active_consistency:
            row = assemble_consistency(problem, f)
            if row is not None:
                blocks_A.append(row[0][None, :])
                blocks_b.append(np.array([row[1]]))
    c, _ = objective(problem)
    lb, ub = variable_bounds(problem)
    A_ub = np.vstack(blocks_A) if blocks_A else np.zeros((0, problem.size))
    b_ub = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    return optkernel.LinearProgram(c, A_ub, b_ub, lb=lb, ub=ub)


@dataclass
class RpncSolution:
    v_star: np.ndarray
    cost: float
    queues: dict
    dropped_promises: tuple = ()
    nodes: int = 0


def solve_rpnc(problem: RpncProblem, active_consistency=None) -> RpncSolution:
    """Globally optimal, lexicographically smallest schedule.

    Raises :class:`SchedulerInfeasible` when the constraints (in practice
    the consistency rows) cannot be met.
    """
    if problem.size == 0:
        return RpncSolution(np.zeros(0), 0.0, {})
    lp = build_program(problem, active_consistency)
    free = np.flatnonzero(lp.ub > 0)
    # fixed-at-zero columns never enter the search
    rep = optkernel.branch_and_bound(lp, free)
    if not rep.ok:
        raise SchedulerInfeasible(f"R-PNC program is {rep.status}")
    v = np.round(rep.x).astype(int)
    _, const = objective(problem)
    queues = {}
    for f, flight in enumerate(problem.flights):
        com = problem.committed.get(flight.flight_id)
        queues[flight.flight_id] = predict_queues(problem.topology, flight, problem.gammas,
                                                  v[problem.flight_columns(f)], com)
    return RpncSolution(v, float(rep.objective + const), queues, nodes=rep.nodes)


def empty_window(problem: RpncProblem, f: int) -> bool:
    """True when no schedule at all can bring flight ``f`` home by its promise."""
    row = assemble_consistency(problem, f)
    if row is None:
        return False
    coeffs, rhs = row
    _, ub = variable_bounds(problem)
    best = float(np.minimum(coeffs, 0) @ ub)
    return best > rhs + 1e-9


def extract_forecasts(solution: RpncSolution, problem: RpncProblem, now: int):
    """Promised arrival (relative) per flight plus fresh ledger entries."""
    promises = {}
    ledger = {}
    for flight in problem.flights:
        if flight.arrived:
            promises[flight.flight_id] = 0
        else:
            traj = solution.queues[flight.flight_id]
            hits = np.flatnonzero(traj[:, flight.destination] >= 0.5)
            promises[flight.flight_id] = int(hits[0]) + 1 if hits.size else None
        a = promises[flight.flight_id]
        if a is not None:
            ledger[flight.flight_id] = LedgerEntry(a, now)
    return promises, ledger


@dataclass(frozen=True)
class Request:
    origin: int
    destination: int
    payload: object = None


@dataclass(frozen=True)
class ControllerState:
    network: NetworkState
    ledger: dict = field(default_factory=dict)
    next_id: int = 0


@dataclass
class StepReport:
    time: int
    activations: np.ndarray
    outcomes: np.ndarray
    promises: dict
    absolute_promises: dict
    deliveries: tuple
    created: tuple
    events: list
    v_star: np.ndarray
    profile: RepetitionProfile


@dataclass
class RpncController:
    topology: NetworkTopology
    phi: float
    horizon: int
    relaxed: bool = False

    def initial_state(self, chains) -> ControllerState:
        return ControllerState(NetworkState(0, (), tuple(chains)))

    def step(self, state: ControllerState, requests, rng: np.random.Generator):
        """One pass of the receding-horizon network policy."""
        net = state.network
        k = net.time
        events = []
        flights = list(net.flights)
        next_id = state.next_id
        created = []
        for req in requests:
            flight = create_request(self.topology, req.origin, req.destination, k, next_id, req.payload)
            flights.append(flight)
            created.append(flight)
            next_id += 1

        profile = RepetitionProfile.from_chains(net.chains, self.phi, k, self.horizon)
        committed = {
            t.flight_id: Committed(t.link, -t.attempts, t.repetitions) for t in net.transmissions
        }
        problem = RpncProblem(self.topology, flights, self.horizon, profile, committed,
                              dict(state.ledger), self.relaxed)
        solution, dropped = self._solve_with_retry(problem, events, k)
        ledger = dict(problem.ledger)
        for fid in dropped:
            ledger[fid] = replace(ledger[fid], active=False)
        promises, fresh = extract_forecasts(solution, problem, k)
        for fid, entry in fresh.items():
            old = ledger.get(fid)
            if old is not None and old.active and entry.absolute > old.absolute:
                raise AssertionError(f"promise for flight {fid} got worse despite consistency row")
            ledger[fid] = entry

        # first block of the plan plus ongoing repetitions
        F, n_v = len(flights), self.topology.n_v
        transmissions = list(net.transmissions)
        busy_flights = {t.flight_id for t in transmissions}
        if solution.v_star.size:
            first = solution.v_star[:F * n_v].reshape(F, n_v)
            for f, flight in enumerate(flights):
                for j in np.flatnonzero(first[f]):
                    if flight.flight_id in busy_flights:
                        raise AssertionError("flight scheduled while already transmitting")
                    transmissions.append(Transmission(flight.flight_id, int(j), k, int(profile.reps[0, j])))
                    busy_flights.add(flight.flight_id)
        activations = np.zeros(n_v, dtype=int)
        for t in transmissions:
            if activations[t.link]:
                raise AssertionError(f"link {t.link} used twice in one step")
            activations[t.link] = 1
        outcomes, chains = sample_and_advance(net.chains, rng)

        by_id = {fl.flight_id: fl for fl in flights}
        still = []
        for t in transmissions:
            t = replace(t, attempts=t.attempts + 1)
            flight = by_id[t.flight_id]
            if outcomes[t.link]:
                v = np.zeros(n_v, dtype=int)
                v[t.link] = 1
                by_id[t.flight_id] = step_flight(flight, self.topology, v, outcomes)
            elif t.attempts >= t.repetitions:
                entry = ledger.get(t.flight_id)
                if entry is not None and entry.active:
                    ledger[t.flight_id] = replace(entry, active=False)
                events.append(("reliability-failure", t.flight_id, t.link, k))
            else:
                still.append(t)

        moved = tuple(by_id[fl.flight_id] for fl in flights)
        deliveries = []
        keep = []
        for fl in moved:
            if fl.arrived:
                entry = ledger.get(fl.flight_id)
                promised = entry.absolute if entry is not None else None
                deliveries.append(Delivery(fl.flight_id, fl.origin, fl.destination, fl.created_at, k + 1,
                                           promised, fl.payload))
            else:
                keep.append(fl)
        for d in deliveries:
            ledger.pop(d.flight_id, None)
        ledger = {fid: replace(e, elapsed=e.elapsed + 1) for fid, e in ledger.items()}
        new_net = NetworkState(k + 1, tuple(keep), tuple(chains), tuple(still),
                               net.delivered + tuple(deliveries))
        absolute = {fid: (k + a if a is not None else None) for fid, a in promises.items()}
        report = StepReport(k, activations, outcomes, promises, absolute, tuple(deliveries), tuple(created),
                            events, solution.v_star, profile)
        return report, ControllerState(new_net, ledger, next_id)

    def _solve_with_retry(self, problem: RpncProblem, events, k):
        try:
            return solve_rpnc(problem), ()
        except SchedulerInfeasible:
            pass
        empty = {problem.flights[f].flight_id for f in range(len(problem.flights)) if empty_window(problem, f)}
        keep = {fid for fid, e in problem.ledger.items() if e.active} - empty
        for fid in sorted(empty):
            events.append(("promise-dropped", fid, None, k))
        try:
            return solve_rpnc(problem, active_consistency=keep), tuple(sorted(empty))
        except SchedulerInfeasible:
            pass
        # repetition counts moved since the promises were made; start over
        dropped = sorted(fid for fid, e in problem.ledger.items() if e.active)
        for fid in dropped:
            if fid not in empty:
                events.append(("promise-dropped", fid, None, k))
        LOG.info("step %d: all consistency rows released", k)
        return solve_rpnc(problem, active_consistency=set()), tuple(dropped)


def policy_step(state: ControllerState, requests, phi: float, H: int, rng, topology: NetworkTopology,
                relaxed: bool = False):
    """Functional wrapper around :meth:`RpncController.step`."""
    return RpncController(topology, phi, H, relaxed).step(state, requests, rng)
