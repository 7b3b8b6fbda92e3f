import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import random_rpnc_problem
from oracles import best_schedule
from delaycosim.forecast import UNREACHABLE, RepetitionProfile, build_gamma
from delaycosim.netmodel import LinkSpec, LinkStateChain, NetworkTopology, PacketFlight, create_request
from delaycosim.rpnc import (
    LedgerEntry,
    Request,
    RpncController,
    RpncProblem,
    assemble_consistency,
    assemble_constituency,
    assemble_processability,
    assemble_reliability,
    build_program,
    extract_forecasts,
    predict_queues,
    solve_rpnc,
)


def topo(n, edges, C=None):
    links = tuple(LinkSpec(j, s, t) for j, (s, t) in enumerate(edges))
    C = np.eye(len(links), dtype=int) if C is None else np.asarray(C, dtype=int)
    return NetworkTopology(n, links, C)


def gammas_for(reps):
    prof = RepetitionProfile(np.asarray(reps, dtype=np.int64))
    return [build_gamma(prof, k) for k in range(prof.horizon + 1)]


def rows_ok(A, b, x):
    return bool(np.all(A @ x <= b + 1e-9))


# queue prediction ------------------------------------------------------------

def test_predict_zero_plan_keeps_queue():
    t = topo(2, [(0, 1)])
    f = create_request(t, 0, 1, 0)
    q = predict_queues(t, f, gammas_for([[1], [1], [1]]), np.zeros(3))
    assert all(row.tolist() == [1, 0] for row in q)


def test_predict_respects_repetitions():
    t = topo(2, [(0, 1)])
    f = create_request(t, 0, 1, 0)
    q = predict_queues(t, f, gammas_for([[2], [2], [2]]), [1, 0, 0])
    assert q[0].tolist() == [1, 0]
    assert q[1].tolist() == [0, 1]


def test_predict_masked_link_has_no_effect():
    t = topo(2, [(0, 1)])
    f = create_request(t, 0, 1, 0)
    q = predict_queues(t, f, gammas_for([[UNREACHABLE], [UNREACHABLE]]), [1, 0])
    assert all(row.tolist() == [1, 0] for row in q)


# constraint families -----------------------------------------------------------

def test_constituency_rows():
    shared = topo(3, [(0, 1), (0, 2)], [[1, 1]])
    A, b = assemble_constituency(shared, 1)
    assert A.tolist() == [[1.0, 1.0]]
    assert b.tolist() == [1.0]
    free = topo(3, [(0, 1), (0, 2)])
    A, _ = assemble_constituency(free, 1)
    assert A.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    one = topo(2, [(0, 1)])
    assert assemble_constituency(one, 2)[0].shape == (2, 2)


def test_reliability_unit_repetitions_generate_nothing():
    t = topo(2, [(0, 1)])
    A, _ = assemble_reliability(RepetitionProfile(np.ones((3, 1), dtype=np.int64)), t, 3)
    assert A.shape[0] == 0


def test_reliability_blocks_following_steps():
    t = topo(2, [(0, 1)])
    A, b = assemble_reliability(RepetitionProfile(np.array([[3], [3], [3]])), t, 3)
    assert not rows_ok(A, b, np.array([1, 1, 0]))
    assert not rows_ok(A, b, np.array([1, 0, 1]))
    assert rows_ok(A, b, np.array([1, 0, 0]))
    assert rows_ok(A, b, np.array([0, 1, 0]))


def test_reliability_conflicting_links():
    t = topo(3, [(0, 1), (2, 1)], [[1, 1]])
    A, b = assemble_reliability(RepetitionProfile(np.array([[2, 1], [2, 1]])), t, 2)
    # v_0^0 together with v_1^1 is forbidden
    assert not rows_ok(A, b, np.array([1, 0, 0, 1]))
    assert rows_ok(A, b, np.array([1, 0, 0, 0]))


def test_consistency_rows():
    t = topo(2, [(0, 1)])
    prof = RepetitionProfile(np.ones((3, 1), dtype=np.int64))
    home = PacketFlight(0, 0, 1, np.array([0, 1]), 0)
    p = RpncProblem(t, [home], 3, prof, ledger={0: LedgerEntry(2, 0)})
    row, rhs = assemble_consistency(p, 0)
    assert rhs == 0.0
    assert row @ np.zeros(3) <= rhs

    f = create_request(t, 0, 1, 0)
    p = RpncProblem(t, [f], 3, prof, ledger={0: LedgerEntry(3, 0, elapsed=1)})
    row, _ = assemble_consistency(p, 0)
    assert np.array_equal(-row, p.gammas[2] * 1.0)

    p = RpncProblem(t, [f], 3, prof, ledger={0: LedgerEntry(3, 0, active=False)})
    assert assemble_consistency(p, 0) is None


def test_processability_rows():
    t = topo(3, [(0, 1), (1, 2)])
    prof = RepetitionProfile(np.ones((2, 2), dtype=np.int64))
    p = RpncProblem(t, [create_request(t, 0, 2, 0)], 2, prof)
    A, b = assemble_processability(p, 0)
    assert rows_ok(A, b, np.zeros(4))
    assert not rows_ok(A, b, np.array([1, 1, 0, 0]))
    assert rows_ok(A, b, np.array([1, 0, 0, 1]))


# master problem ----------------------------------------------------------------

def test_single_hop_schedule():
    t = topo(2, [(0, 1)])
    p = RpncProblem(t, [create_request(t, 0, 1, 0)], 2, RepetitionProfile(np.ones((2, 1), dtype=np.int64)))
    sol = solve_rpnc(p)
    assert sol.v_star.tolist() == [1, 0]
    # the cost sums kappa = 1..H; the packet already sits at its destination at kappa = 1
    assert sol.cost == pytest.approx(0.0)
    promises, _ = extract_forecasts(sol, p, 0)
    assert promises == {0: 1}


def test_no_flights():
    t = topo(2, [(0, 1)])
    sol = solve_rpnc(RpncProblem(t, [], 3, RepetitionProfile(np.ones((3, 1), dtype=np.int64))))
    assert sol.v_star.size == 0
    assert sol.cost == 0.0


def three_node_problem(H=5):
    t = topo(3, [(0, 1), (1, 2), (0, 2)])
    reps = np.array([[2, 3, 4], [2, 1, 3], [1, 1, 2], [1, 1, 2], [1, 1, 2]])[:H]
    return t, RpncProblem(t, [create_request(t, 0, 2, 0)], H, RepetitionProfile(reps))


def test_three_node_relay_schedule():
    t, p = three_node_problem()
    sol = solve_rpnc(p)
    promises, ledger = extract_forecasts(sol, p, 0)
    assert promises[0] == 3
    assert ledger[0].absolute == 3
    assert sol.v_star[p.index(0, 0, 0)] == 1
    assert sol.v_star[p.index(2, 0, 1)] == 1
    cost, vec = best_schedule(t, p.flights, p.profile.reps, 5)
    assert sol.cost == pytest.approx(cost)
    assert sol.v_star.tolist() == vec.tolist()


def test_extract_forecasts_cases():
    t = topo(2, [(0, 1)])
    prof = RepetitionProfile(np.full((3, 1), 2, dtype=np.int64))
    p = RpncProblem(t, [create_request(t, 0, 1, 0)], 3, prof)
    sol = solve_rpnc(p)
    assert extract_forecasts(sol, p, 0)[0] == {0: 2}

    home = PacketFlight(1, 0, 1, np.array([0, 1]), 0)
    p = RpncProblem(t, [home], 3, prof)
    assert extract_forecasts(solve_rpnc(p), p, 0)[0] == {1: 0}

    masked = RpncProblem(t, [create_request(t, 0, 1, 0)], 2,
                         RepetitionProfile(np.full((2, 1), UNREACHABLE, dtype=np.int64)))
    promises, ledger = extract_forecasts(solve_rpnc(masked), masked, 0)
    assert promises == {0: None}
    assert ledger == {}


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_solve_rpnc_matches_enumeration(seed):
    p = random_rpnc_problem(np.random.default_rng(seed))
    sol = solve_rpnc(p)
    cost, vec = best_schedule(p.topology, p.flights, p.profile.reps, p.horizon)
    assert sol.cost == pytest.approx(cost)
    assert sol.v_star.tolist() == vec.tolist()
    assert build_program(p).residual(sol.v_star) <= 1e-9


# policy loop -----------------------------------------------------------------

def test_idle_network_only_advances_time():
    t = topo(2, [(0, 1)])
    ctl = RpncController(t, 0.9, 3)
    state = ctl.initial_state([LinkStateChain.constant(1.0)])
    report, state = ctl.step(state, [], np.random.default_rng(0))
    assert report.activations.tolist() == [0]
    assert state.network.time == 1
    assert state.network.flights == ()


def test_deterministic_rollout_meets_promise():
    t = topo(3, [(0, 1), (1, 2), (0, 2)])
    ctl = RpncController(t, 0.99, 5)
    state = ctl.initial_state([LinkStateChain.constant(1.0)] * 3)
    rng = np.random.default_rng(0)
    report, state = ctl.step(state, [Request(0, 2)], rng)
    promise = report.absolute_promises[0]
    assert promise == 1
    deliveries = list(report.deliveries)
    while not deliveries:
        report, state = ctl.step(state, [], rng)
        deliveries += report.deliveries
    assert deliveries[0].arrived_at == promise


def test_monte_carlo_delivery_by_promise():
    t = topo(2, [(0, 1)])
    ctl = RpncController(t, 0.99, 4)
    on_time = 0
    runs = 1000
    for seed in range(runs):
        rng = np.random.default_rng(seed)
        state = ctl.initial_state([LinkStateChain.constant(0.9)])
        report, state = ctl.step(state, [Request(0, 1)], rng)
        promise = report.absolute_promises[0]
        delivered = list(report.deliveries)
        for _ in range(promise):
            if delivered:
                break
            report, state = ctl.step(state, [], rng)
            delivered += report.deliveries
        on_time += bool(delivered) and delivered[0].arrived_at <= promise
    assert on_time / runs >= 0.98
