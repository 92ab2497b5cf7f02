import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import qp_by_enumeration, random_qp
from polyflow_mpc.qp import QpProblem, QpSettings, QpStatus, kkt_check, solve_qp, solve_qp_batch


def test_scalar_lower_bound():
    sol = solve_qp(QpProblem([[2.0]], [0.0], [[-1.0]], [-1.0]))
    assert sol.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(sol.z, [1.0], atol=1e-8)
    assert sol.objective == pytest.approx(1.0, abs=1e-8)


def test_unconstrained():
    sol = solve_qp(QpProblem(np.eye(2), [-2.0, -4.0]))
    np.testing.assert_allclose(sol.z, [2.0, 4.0], atol=1e-8)


def test_box_projection():
    G = np.vstack([np.eye(2), -np.eye(2)])
    target = np.array([2.0, 0.0])
    sol = solve_qp(QpProblem(2 * np.eye(2), -2 * target, G, np.ones(4)))
    np.testing.assert_allclose(sol.z, np.clip(target, -1, 1), atol=1e-8)


def test_infeasible():
    sol = solve_qp(QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [0.0, -1.0]))
    assert sol.status is QpStatus.INFEASIBLE


def test_unbounded_lp():
    sol = solve_qp(QpProblem(np.zeros((2, 2)), [-1.0, 0.0], [[0.0, 1.0]], [1.0]))
    assert sol.status is QpStatus.UNBOUNDED


def test_equality_constrained():
    prob = QpProblem(np.eye(3), np.zeros(3), E=np.ones((1, 3)), e=[1.0])
    sol = solve_qp(prob)
    np.testing.assert_allclose(sol.z, np.full(3, 1 / 3), atol=1e-8)
    assert kkt_check(prob, sol).passed


def test_kkt_check_rejects_perturbation():
    rng = np.random.default_rng(1)
    prob = QpProblem(np.eye(2) * 2, [-4.0, 0.0], np.vstack([np.eye(2), -np.eye(2)]), np.ones(4))
    sol = solve_qp(prob)
    assert kkt_check(prob, sol).passed
    bad = type(sol)(**{**sol.__dict__, "z": sol.z + 1e-2 * rng.normal(size=2)})
    assert not kkt_check(prob, bad).passed


def test_nan_rejected():
    with pytest.raises(ValueError):
        QpProblem([[1.0]], [np.nan])
    with pytest.raises(ValueError):
        QpProblem([[1.0, 0.0]], [0.0])


def test_random_qps_match_enumeration():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        H, g, G, b = random_qp(rng)
        prob = QpProblem(H, g, G, b)
        sol = solve_qp(prob)
        assert sol.status is QpStatus.OPTIMAL
        assert kkt_check(prob, sol, 1e-6).passed
        worst = max(worst, np.linalg.norm(sol.z - qp_by_enumeration(H, g, G, b)))
    assert worst <= 1e-5


@given(seed=st.integers(0, 10**6), gamma=st.floats(0.1, 10.0))
def test_scaling_invariance(seed, gamma):
    H, g, G, b = random_qp(np.random.default_rng(seed))
    z1 = solve_qp(QpProblem(H, g, G, b)).z
    z2 = solve_qp(QpProblem(gamma * H, gamma * g, G, b)).z
    np.testing.assert_allclose(z1, z2, atol=1e-6)


@given(seed=st.integers(0, 10**6))
def test_warm_start_does_not_change_answer(seed):
    rng = np.random.default_rng(seed)
    H, g, G, b = random_qp(rng)
    prob = QpProblem(H, g, G, b)
    a = solve_qp(prob)
    c = solve_qp(prob, warm_start=rng.normal(size=len(g)))
    assert abs(a.objective - c.objective) <= 1e-6


def test_batch_matches_single_solves():
    rng = np.random.default_rng(3)
    H, _, G, _ = random_qp(rng)
    g = rng.normal(size=(6, H.shape[0]))
    b = rng.uniform(0.1, 1.0, size=(6, G.shape[0]))
    batch = solve_qp_batch(H, G, None, g, b)
    for i, s in enumerate(batch):
        single = solve_qp(QpProblem(H, g[i], G, b[i]))
        np.testing.assert_allclose(s.z, single.z, atol=1e-7)


def test_optimal_status_meets_tolerances():
    rng = np.random.default_rng(9)
    cfg = QpSettings(eps_p=1e-7, eps_d=1e-7)
    for _ in range(20):
        H, g, G, b = random_qp(rng)
        sol = solve_qp(QpProblem(H, g, G, b), cfg)
        assert sol.optimal
        assert sol.primal_residual <= cfg.eps_p and sol.dual_residual <= cfg.eps_d


def test_degenerate_lp_polishes():
    # many constraints active at the optimum (vertex of a pyramid)
    G = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    b = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    sol = solve_qp(QpProblem(1e-9 * np.eye(2), [-1.0, 0.0], G, b))
    assert sol.optimal
    np.testing.assert_allclose(sol.z, [1.0, 0.0], atol=1e-6)
