import dataclasses

import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import PEST_X0
from polyflow_mpc.dynamics import DiscreteSystem, demo_linear_system
from polyflow_mpc.lifting import LiftedModel, StateBasis
from polyflow_mpc.lincontrol import ConstraintSpec, Polytope, solve_dare
from polyflow_mpc.mpc import (
    GridSpec,
    MpcSpec,
    build_condensed_qp,
    design_mpc,
    lq_cost,
    lqr_controller,
    mpc_step,
    rollout,
    run_closed_loop,
    scan_feasible_domain,
    shift_warm_start,
    simulate_feedback,
    solve_many,
)
from polyflow_mpc.qp import QpStatus


@pytest.fixture(scope="module")
def lin():
    sys = demo_linear_system()
    model = LiftedModel(sys.params["A"], sys.params["B"], np.eye(2), StateBasis(2))
    cons = ConstraintSpec(Polytope.from_box([-1.0, -1.0], [1.0, 1.0]), Polytope.from_box([-0.5], [0.5]))
    return sys, design_mpc(model, cons, 5)


def recursive_cost(spec, z0, u_seq):
    m = spec.model
    Qs = m.C.T @ spec.Q @ m.C
    x = z0
    total = 0.0
    for u in u_seq:
        total += x @ Qs @ x + u @ spec.R @ u
        x = m.A @ x + m.B @ u
    return total + x @ spec.P @ x


def test_origin_is_trivial(block_spec):
    sol = mpc_step(block_spec, np.zeros(4))
    assert sol.optimal
    np.testing.assert_allclose(sol.u_seq, 0.0, atol=1e-9)
    assert abs(sol.cost) <= 1e-12


def test_condensed_matches_recursion(block_spec, pest_spec):
    rng = np.random.default_rng(0)
    for spec, x in ((block_spec, rng.uniform(-0.3, 0.3, 4)), (pest_spec, PEST_X0)):
        prob = build_condensed_qp(spec, x)
        z0 = spec.model.lift(x)
        for _ in range(5):
            u = rng.uniform(-0.2, 0.2, (spec.horizon, spec.model.m))
            ref = recursive_cost(spec, z0, u)
            z = u.ravel()
            # the expanded quadratic cancels large terms when P is badly scaled
            scale = abs(0.5 * z @ prob.Hq @ z) + abs(prob.g @ z) + abs(prob.constant)
            assert abs(prob.objective(z) - ref) <= 1e-9 * max(1.0, scale)
            np.testing.assert_allclose(spec.condensed.predict(z0, u), rollout(spec.model, z0, u),
                                       rtol=1e-10, atol=1e-10)


def test_unconstrained_first_move_is_lqr(block_spec):
    """With inactive constraints and the DARE terminal weight the first move is u = K T(x)."""
    x = np.array([0.02, -0.01, 0.015, 0.0])
    for N in (1, 4):
        spec = dataclasses.replace(block_spec, horizon=N)
        sol = mpc_step(spec, x)
        assert sol.optimal
        np.testing.assert_allclose(sol.u_seq[0], spec.K @ spec.model.lift(x), atol=1e-7)


def test_wrong_state_shape(block_spec):
    with pytest.raises(ValueError):
        build_condensed_qp(block_spec, np.zeros(3))
    with pytest.raises(ValueError):
        dataclasses.replace(block_spec, Q=np.eye(3))


def test_warm_start_gives_same_solution(pest_spec):
    cold = mpc_step(pest_spec, PEST_X0)
    warm = mpc_step(pest_spec, PEST_X0, warm_start=np.full(pest_spec.horizon, 0.1))
    np.testing.assert_allclose(warm.u_seq, cold.u_seq, atol=1e-6)
    assert shift_warm_start(cold.u_seq).shape == cold.u_seq.ravel().shape


def test_cost_nonincreasing_in_horizon(block_spec):
    rng = np.random.default_rng(2)
    for x in rng.uniform(-0.4, 0.4, (4, 4)):
        costs = []
        for N in range(2, 7):
            sol = mpc_step(dataclasses.replace(block_spec, horizon=N), x)
            if sol.optimal:
                costs.append(sol.cost)
            else:
                costs.append(np.inf)
        for a, b in zip(costs, costs[1:]):
            assert b <= a + 1e-7 * max(1.0, abs(a))


def test_two_step_brute_force(block_spec):
    spec = dataclasses.replace(block_spec, horizon=2)
    x = np.array([0.3, -0.2, 0.1, 0.2])
    sol = mpc_step(spec, x)
    assert sol.optimal
    prob = build_condensed_qp(spec, x)
    grid = np.linspace(-1, 1, 401)
    U = np.stack(np.meshgrid(grid, grid, indexing="ij"), -1).reshape(-1, 2)
    feas = np.all(U @ prob.G.T <= prob.bound[None] + 1e-12, axis=1)
    vals = np.array([prob.objective(u) for u in U[feas]])
    assert sol.cost <= vals.min() + 1e-9
    assert vals.min() - sol.cost <= 1e-2 * max(1.0, sol.cost)


def test_far_state_infeasible_and_terminal_state_optimal(pest_spec):
    assert mpc_step(pest_spec, np.array([0.5, 0.8])).status is QpStatus.INFEASIBLE
    x = np.array([0.005, -0.004])
    assert pest_spec.terminal_set.contains(pest_spec.model.lift(x))
    assert mpc_step(pest_spec, x).optimal


def test_closed_loop_invariants(pest, pest_spec):
    run = run_closed_loop(pest, pest_spec, PEST_X0, T=30)
    assert run.completed and run.lost_step is None
    assert len(run.states) == 31 and len(run.inputs) == 30
    x = PEST_X0
    for t, u in enumerate(run.inputs):
        x = pest.step(x, u)
        np.testing.assert_array_equal(x, run.states[t + 1])
    ref = lq_cost(run.states, np.vstack([run.inputs, run.final_input]), pest_spec.Q, pest_spec.R)
    assert run.lq_cost == ref
    assert pest_spec.constraints.state_set.contains(run.states, 1e-7).all()
    assert pest_spec.constraints.input_set.contains(run.inputs, 1e-7).all()


def test_closed_loop_edge_cases(lin):
    sys, spec = lin
    out = run_closed_loop(sys, spec, [2.0, 0.0], T=5)
    assert out.terminated == "lost_feasibility" and out.lost_step == 0
    assert out.lq_cost == 0.0 and len(out.inputs) == 0
    zero = run_closed_loop(sys, spec, [0.0, 0.0], T=5)
    assert zero.completed
    np.testing.assert_allclose(zero.states, 0.0, atol=1e-12)
    assert zero.lq_cost <= 1e-18
    with pytest.raises(ValueError):
        run_closed_loop(sys, spec, [0.0, 0.0], T=0)
    bad = DiscreteSystem(2, 1, lambda x, u: np.full_like(x, np.nan))
    with pytest.raises(RuntimeError):
        run_closed_loop(bad, spec, [0.1, 0.1], T=3)


def test_warm_start_does_not_change_closed_loop(lin):
    sys, spec = lin
    a = run_closed_loop(sys, spec, [0.6, -0.4], T=20, warm_start=True)
    b = run_closed_loop(sys, spec, [0.6, -0.4], T=20, warm_start=False)
    np.testing.assert_allclose(a.states, b.states, atol=1e-6)


def test_grid_spec():
    g = GridSpec.over_box(Polytope.from_box([-1.0, 0.0], [1.0, 2.0]), 3)
    assert g.shape == (3, 3)
    pts = g.points()
    np.testing.assert_allclose(pts[1], [-1.0, 1.0])
    np.testing.assert_allclose(pts[3], [0.0, 0.0])


@pytest.fixture(scope="module")
def lin_scan(lin):
    _, spec = lin
    return scan_feasible_domain(spec, GridSpec.over_box(spec.constraints.state_set, 21), "lin")


def test_scan_mask_matches_status(lin_scan):
    assert lin_scan.mask.shape == (21, 21)
    np.testing.assert_array_equal(lin_scan.mask, lin_scan.statuses == QpStatus.OPTIMAL.value)
    assert 0 < lin_scan.count < 21 * 21
    assert set(np.unique(lin_scan.statuses)) <= {"optimal", "infeasible"}


def test_scan_matches_feasibility_oracle(lin, lin_scan):
    _, spec = lin
    pts = lin_scan.grid.points()
    for p, feas in zip(pts, lin_scan.mask.ravel()):
        prob = build_condensed_qp(spec, p)
        res = linprog(np.zeros(prob.p), A_ub=prob.G, b_ub=prob.bound, bounds=[(None, None)] * prob.p, method="highs")
        assert feas == (res.status == 0), p


def test_scan_consistent_with_single_solves(lin, lin_scan):
    _, spec = lin
    pts = lin_scan.grid.points()
    idx = np.random.default_rng(0).choice(len(pts), 25, replace=False)
    for i in idx:
        assert mpc_step(spec, pts[i]).optimal == lin_scan.mask.ravel()[i]
    batch = solve_many(spec, pts[idx])
    assert [s.optimal for s in batch] == list(lin_scan.mask.ravel()[idx])


def test_relaxed_terminal_set_enlarges_domain(lin, lin_scan):
    _, spec = lin
    free = scan_feasible_domain(dataclasses.replace(spec, terminal_set=None), lin_scan.grid, "free")
    assert np.all(free.mask[lin_scan.mask])
    assert free.count >= lin_scan.count


def test_scan_requires_planar_state(block_spec):
    with pytest.raises(ValueError):
        scan_feasible_domain(block_spec, GridSpec(((0, 1, 2), (0, 1, 2))))


def test_parallel_scan_matches_serial(lin, lin_scan):
    _, spec = lin
    par = scan_feasible_domain(spec, lin_scan.grid, "lin", jobs=2)
    np.testing.assert_array_equal(par.mask, lin_scan.mask)


def test_lqr_controller_stabilizes(lin):
    sys, spec = lin
    m = spec.model
    dare = solve_dare(m.A, m.B, m.C.T @ spec.Q @ m.C, spec.R)
    xs = simulate_feedback(sys, lqr_controller(m, dare), [0.1, -0.1], 200)
    assert np.linalg.norm(xs[-1]) <= 1e-8


def test_spec_allows_missing_terminal_set(block_lift, block_cons):
    spec = design_mpc(block_lift, block_cons, 3, terminal=False)
    assert spec.terminal_set is None
    assert isinstance(spec, MpcSpec)
    assert mpc_step(spec, np.full(4, 0.1)).optimal
