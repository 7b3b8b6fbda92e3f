import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import random_dmpc_instance, random_plant, solved_instance
from oracles import stacked_recursion, vertex_violation
from delaycosim import dmpc, optkernel

A_PL = [[1.0, 0.3], [0.0, 1.0]]
B_PL = [[0.045], [0.3]]


def platoon_plant():
    return dmpc.PlantModel.box_input(A_PL, B_PL, -4.0, 4.0)


def wide_plant(A, B):
    return dmpc.PlantModel.box_input(A, B, -100.0, 100.0)


# estimation and stacking ---------------------------------------------------------

def test_estimate_state_examples():
    plant = platoon_plant()
    x = np.array([0.4, -0.2])
    assert np.array_equal(dmpc.estimate_state(plant, x, [], 0), x)
    assert dmpc.estimate_state(plant, [0.0, 0.0], [[4.0]], 1) == pytest.approx([0.18, 1.2])
    A = np.array(A_PL)
    assert dmpc.estimate_state(plant, x, [[0.0], [0.0]], 2) == pytest.approx(A @ A @ x)
    with pytest.raises(dmpc.MissingInputs):
        dmpc.estimate_state(plant, x, [[0.0]], 2)


def test_single_step_stack():
    plant = platoon_plant()
    m = dmpc.build_models(plant, [], 1)
    assert np.array_equal(m.A_tilde, np.vstack([np.eye(2), np.array(A_PL)]))
    assert np.array_equal(m.B_tilde, np.vstack([np.zeros((2, 1)), np.array(B_PL)]))


def test_zero_input_matrices():
    plant = wide_plant(np.array(A_PL), np.zeros((2, 1)))
    m = dmpc.build_models(plant, [("p", plant)], 3, [1])
    x0 = np.array([1.0, -1.0, 0.5, 2.0])
    u = np.ones(3)
    up = np.ones(3)
    du = np.ones(m.n_delta)
    assert np.allclose(m.predict(x0, u, up, du), m.A_tilde @ x0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), H=st.integers(1, 5), n_p=st.integers(0, 2))
def test_stacking_matches_recursion(seed, H, n_p):
    rng = np.random.default_rng(seed)
    n_x = int(rng.integers(1, 4))
    plant = random_plant(rng, n_x, int(rng.integers(1, 3)))
    preds = [(f"p{i}", random_plant(rng, int(rng.integers(1, 3)), int(rng.integers(1, 3)))) for i in range(n_p)]
    ages = [int(rng.integers(0, 3)) for _ in range(n_p)]
    m = dmpc.build_models(plant, preds, H, ages)
    x0 = rng.standard_normal(m.n_x)
    u = rng.standard_normal(H * plant.n_u)
    up = rng.standard_normal(H * m.n_up)
    du = rng.standard_normal(m.n_delta)
    expected = stacked_recursion(plant, preds, H, x0, u, up, du, ages)
    assert np.max(np.abs(m.predict(x0, u, up, du) - expected)) <= 1e-10


# feedback structure -------------------------------------------------------------

def test_support_without_delay():
    H = 4
    mask = dmpc.feedback_support([0] * H, H)
    window = list(range(1, H))
    for l in range(H):
        for idx, r in enumerate(window):
            assert mask[l, idx] == (1 <= r <= l)


def test_support_when_nothing_arrives():
    H = 4
    mask = dmpc.feedback_support([H] * H, H)
    for l in range(H):
        # rows with l - d_l < 1 - d_0 have an empty window
        assert mask[l].any() == (l - H >= 1 - H)
    assert not mask[0].any()


def test_support_index_inequality():
    d = (2, 2, 1, 1, 1)
    H = 5
    mask = dmpc.feedback_support(d, H)
    window = list(range(1 - d[0], H))
    assert mask.shape == (H, len(window))
    expected = np.array([[1 - d[0] <= r <= l - d[l] for r in window] for l in range(H)])
    assert np.array_equal(mask, expected)
    # the current input never reacts to a deviation
    assert not mask[0].any()


def test_support_block_sizes():
    mask = dmpc.feedback_support([1, 1, 1], 3, n_u=2, n_up=3)
    assert mask.shape == (6, 9)
    assert mask[2:4, 0:3].all()


# admissible set and the two stages -----------------------------------------------

def test_degenerate_box_reduces_to_nominal_constraints():
    rng = np.random.default_rng(4)
    adm, weights = random_dmpc_instance(rng)
    adm0 = dmpc.build_admissible_set(adm.model, dmpc.UncertaintyBox(np.zeros(adm.model.n_delta),
                                                                    np.zeros(adm.model.n_delta)),
                                     adm.peer_traj, adm.x0, adm.state_con, adm.support)
    expected_rhs = adm0.F5 - adm0.F1 @ adm0.x0 - adm0.F3 @ adm0.peer_traj
    assert np.allclose(adm0.rhs, expected_rhs)
    pol = dmpc.solve_stage1(adm0, weights)
    P, c, _ = dmpc.stage1_cost_terms(adm0.model, weights, adm0.x0, adm0.peer_traj)
    nominal = optkernel.solve_qp(optkernel.QuadraticProgram(c, adm0.F2, adm0.rhs, Q=P))
    assert nominal.ok
    assert np.allclose(pol.v, nominal.x, atol=1e-5)


def test_scalar_stage1():
    plant = wide_plant([[1.0]], [[1.0]])
    m = dmpc.build_models(plant, [], 1)
    adm = dmpc.build_admissible_set(m, dmpc.UncertaintyBox([], []), np.zeros(0), [1.0], None)
    pol = dmpc.solve_stage1(adm, dmpc.Weights([[1.0]], [[1.0]], [[1.0]]))
    assert pol.v[0] == pytest.approx(-0.5, abs=1e-6)


def test_origin_is_optimal():
    plant = platoon_plant()
    m = dmpc.build_models(plant, [("p", plant)], 3, [1])
    box = dmpc.UncertaintyBox(np.zeros(m.n_delta), np.zeros(m.n_delta))
    adm = dmpc.build_admissible_set(m, box, np.zeros(3), np.zeros(4), None)
    pol = dmpc.solve_stage1(adm, dmpc.Weights(np.eye(4), np.eye(2), np.eye(4)))
    assert np.allclose(pol.v, 0.0, atol=1e-8)
    assert pol.cost == pytest.approx(0.0, abs=1e-10)


def balancing_problem(bound):
    plant = wide_plant([[1.0]], [[1.0]])
    H = 3
    m = dmpc.build_models(plant, [("p", plant)], H, [0])
    box = dmpc.UncertaintyBox(np.full(m.n_delta, bound), np.full(m.n_delta, bound))
    support = dmpc.feedback_support([0] * H, H)
    adm = dmpc.build_admissible_set(m, box, np.zeros(H), np.zeros(2), None, support)
    weights = dmpc.Weights(np.eye(2), np.eye(2), np.eye(2))
    pol1 = dmpc.solve_stage1(adm, weights)
    f1 = {l: [np.array([bound, bound])] for l in range(1, H)}
    return adm, pol1, dmpc.solve_stage2(adm, pol1.v, f1, [0])


def test_stage2_balances_bounds():
    adm, pol1, pol2 = balancing_problem(0.5)
    assert pol2.cost <= 1e-6
    assert np.allclose(pol2.b_out[1:], 0.5, atol=1e-4)
    assert np.allclose(pol2.b_out[0], 0.0, atol=1e-9)


def test_stage2_without_incoming_uncertainty():
    adm, pol1, pol2 = balancing_problem(0.0)
    assert np.allclose(pol2.b_out, 0.0, atol=1e-9)
    assert pol2.cost <= 1e-12


def test_zero_deviation_applies_nominal_input():
    adm, pol1, pol2 = balancing_problem(0.5)
    assert np.array_equal(pol2.inputs(np.zeros(adm.model.n_delta)), pol2.v)
    assert np.array_equal(dmpc.applied_input(pol2, 1), pol1.v[:1])


def test_root_controller_is_plain_mpc():
    plant = platoon_plant()
    w = dmpc.Weights(np.eye(2), [[0.1]], np.eye(2))
    ctl = dmpc.LocalController("root", plant, [], w, 4)
    res = ctl.step(0, [1.0, 0.0], {}, dmpc.DelayState(out_delay=2))
    m = dmpc.build_models(plant, [], 4)
    adm = dmpc.build_admissible_set(m, dmpc.UncertaintyBox([], []), np.zeros(0), [1.0, 0.0], None)
    assert np.allclose(res.u, dmpc.solve_stage1(adm, w).v[:1], atol=1e-7)
    assert res.stage2.K.size == 0
    assert np.allclose(res.message.bounds, 0.0)


def test_missing_predecessor_message():
    plant = platoon_plant()
    w = dmpc.Weights(np.eye(4), np.eye(2), np.eye(4))
    ctl = dmpc.LocalController("f", plant, [("p", plant)], w, 3, tail_bounds={"p": np.ones(2)})
    with pytest.raises(dmpc.MissingInputs):
        ctl.step(0, [0.0, 0.0], {}, dmpc.DelayState())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_robust_feasibility_on_vertices(seed):
    adm, pol1, pol2 = solved_instance(seed)
    assert vertex_violation(adm, pol1) <= 1e-6
    assert vertex_violation(adm, pol2) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_support_discipline(seed):
    adm, pol1, pol2 = solved_instance(seed)
    for pol in (pol1, pol2):
        assert np.all(pol.K[~adm.support] == 0.0)
    assert np.array_equal(pol2.v, pol1.v)


def test_two_predecessors_controller():
    plant = platoon_plant()
    w = dmpc.Weights(np.eye(6), 0.1 * np.eye(3), np.eye(6))
    tails = {"a": np.full(2, 0.5), "b": np.full(2, 0.5)}
    ctl = dmpc.LocalController("f", plant, [("a", plant), ("b", plant)], w, 3, tail_bounds=tails)
    bounds = np.full((3, 2), 0.2)
    msg_a = dmpc.PeerMessage("a", 0, np.array([1.0, 0.5]), np.array([0.5, 0.5, 0.5]), bounds)
    msg_b = dmpc.PeerMessage("b", 1, np.array([0.2, 0.0]), np.zeros(3), bounds)
    ages = {"a": [2, 2, 1], "b": [1, 1, 1]}
    res = ctl.step(2, [0.0, 0.0], {"a": msg_a, "b": msg_b}, dmpc.DelayState({"a": 2, "b": 1}, ages, 0))
    assert res.ages == [2, 1]
    assert res.admissible.model.n_delta == (3 - 1 + 2) + (3 - 1 + 1)
    assert vertex_violation(res.admissible, res.stage2) <= 1e-6
    # predecessor a was estimated over two steps of its own plan
    assert np.allclose(res.x0[2:4], dmpc.estimate_state(plant, [1.0, 0.5], [[0.5], [0.5]], 2))


def test_containment_bounds_first_step():
    plant = platoon_plant()
    prev = dmpc.PeerMessage("s", 3, np.zeros(2), np.array([1.0, 2.0, 3.0]), np.array([[0.0, 0.0], [0.5, 0.25], [1, 1]]))
    b = dmpc.containment_bounds(plant, prev, 4, 3, 1)
    # step 4 is the previous message's second entry: 2.0 + 0.5 / -(2.0 - 0.25)
    assert b[:2].tolist() == [2.5, -1.75]
    assert b[2:].tolist() == [4.0, 4.0, 4.0, 4.0]
    assert dmpc.containment_bounds(plant, prev, 4, 3, 0).tolist() == [4.0] * 6


def test_peer_message_accessors():
    msg = dmpc.PeerMessage("s", 5, np.zeros(2), np.array([1.0, 2.0]), np.ones((2, 2)))
    assert msg.planned_input(5, 1).tolist() == [1.0]
    assert msg.planned_input(9, 1).tolist() == [2.0]
    assert msg.bound(7) is None
    assert msg.bound(6).tolist() == [1.0, 1.0]


def test_info_graph():
    g = dmpc.InfoGraph({"b": ("a",), "c": ("b", "a")})
    assert g.order == ["a", "b", "c"]
    assert g.followers("a") == ("b", "c")
    with pytest.raises(ValueError):
        dmpc.InfoGraph({"a": ("b",), "b": ("a",)})


def test_plant_rejects_empty_input_set():
    with pytest.raises(ValueError):
        dmpc.PlantModel.box_input([[1.0]], [[1.0]], 1.0, 1.0)
