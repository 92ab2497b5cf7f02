import pickle

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polyflow_mpc.dynamics import (
    Polynomial,
    demo_linear_system,
    input_jacobians,
    iterate_map,
    iterates,
    jacobian_linearization,
    linear_system,
    make_system,
    pest_model,
    registered_systems,
    stacked_basis,
)


def pest_unshifted(v, p, a, r=0.5, c=0.2, kappa=2.0, d=0.2):
    return v + c * v * (1 - v / kappa) - r * v * p, d * p + v * p - a * p


def test_pest_equilibrium_is_origin():
    sys = pest_model()
    np.testing.assert_allclose(sys.step(np.zeros(2), np.zeros(1)), 0.0, atol=1e-15)


@given(st.floats(-0.5, 0.5), st.floats(-0.2, 0.8), st.floats(-0.2, 0.2))
def test_pest_matches_unshifted_form(x1, x2, u):
    v, p = pest_unshifted(x1 + 1.0, x2 + 0.2, u + 0.2)
    out = pest_model().step([x1, x2], [u])
    np.testing.assert_allclose(out, [v - 1.0, p - 0.2], rtol=1e-13, atol=1e-14)


def test_pest_jacobian_matches_hand_derivation():
    A, B = jacobian_linearization(pest_model())
    np.testing.assert_allclose(A, [[0.9, -0.5], [0.2, 1.0]], atol=1e-9)
    np.testing.assert_allclose(B, [[0.0], [-0.2]], atol=1e-9)


def test_step_broadcasts_and_validates():
    sys = pest_model()
    x = np.zeros((5, 3, 2))
    u = np.zeros((5, 3, 1))
    assert sys.step(x, u).shape == (5, 3, 2)
    with pytest.raises(ValueError):
        sys.step(np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        sys.step(np.zeros(2), np.zeros(2))


def test_iterates_agree_with_iterate_map():
    sys = make_system("immersible_block")
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 4)
    u = rng.uniform(-1, 1, 1)
    its = iterates(sys, x, 5, u)
    for ell in range(6):
        np.testing.assert_array_equal(its[ell], iterate_map(sys, x, u, ell))
    assert stacked_basis(sys, x, 3).shape == (16,)
    with pytest.raises(ValueError):
        iterate_map(sys, x, u, -1)


def test_linear_iterates_and_input_jacobians():
    sys = demo_linear_system()
    A, B = sys.params["A"], sys.params["B"]
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(iterate_map(sys, x, np.zeros(1), 3), np.linalg.matrix_power(A, 3) @ x, atol=1e-15)
    for ell, b in enumerate(input_jacobians(sys, 4), start=1):
        np.testing.assert_allclose(b, np.linalg.matrix_power(A, ell - 1) @ B, atol=1e-9)


@pytest.mark.parametrize("name", registered_systems())
@given(seed=st.integers(0, 2**31), ell=st.integers(0, 6))
def test_semigroup_property(name, seed, ell):
    sys = make_system(name)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, sys.n)
    u = rng.uniform(-0.2, 0.2, sys.m)
    lhs = iterate_map(sys, sys.step(x, u), np.zeros(sys.m), ell)
    rhs = iterate_map(sys, x, u, ell + 1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-300)


@pytest.mark.parametrize("name", registered_systems())
def test_split_composition(name):
    sys = make_system(name)
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, sys.n)
    u = rng.uniform(-0.2, 0.2, sys.m)
    for ell in range(1, 7):
        for j in range(1, ell + 1):
            np.testing.assert_allclose(
                iterate_map(sys, iterate_map(sys, x, u, j), np.zeros(sys.m), ell - j),
                iterate_map(sys, x, u, ell),
                rtol=1e-12,
            )


def test_polynomial_evaluation():
    p = Polynomial.from_terms([([1, 1], [0.5, 0.0]), ([2, 0], [0.0, 0.3])], 2, 2)
    s = np.array([2.0, -1.0])
    np.testing.assert_allclose(p(s), [0.5 * 2 * -1, 0.3 * 4])
    assert p.degree == 2
    assert Polynomial.from_terms([], 2, 2).degree == 0


def test_registry_and_pickling():
    assert set(registered_systems()) == {"pest", "linear", "immersible_block"}
    with pytest.raises(ValueError):
        make_system("nope")
    for name in registered_systems():
        sys = make_system(name)
        clone = pickle.loads(pickle.dumps(sys))
        x = np.full(sys.n, 0.1)
        u = np.full(sys.m, 0.05)
        np.testing.assert_array_equal(clone.step(x, u), sys.step(x, u))
        assert sys.to_dict()["name"] == name


def test_custom_params_round_trip():
    sys = make_system("pest", {"r": 0.4})
    assert sys.params["r"] == 0.4 and sys.params["kappa"] == 2.0
    lin = linear_system([[0.5]], [[1.0]])
    again = make_system("linear", lin.params)
    np.testing.assert_array_equal(again.step([1.0], [1.0]), [1.5])
