import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcmi.lp import (
    OPTIMAL,
    TRIVIAL_NULL,
    DualPolytope,
    EmptyFeasibleSet,
    StandardFormLP,
    enumerate_dual_vertices,
    max_linear_objective,
    solve_primal_dual,
)
from lcmi.moments import NormalModel

from conftest import random_model


def test_no_nuisance_is_max():
    sol = solve_primal_dual(NormalModel([1.0, 2.0], np.zeros((2, 0)), np.eye(2)))
    assert sol.eta_hat == pytest.approx(2.0)
    assert sol.binding_set == (1,)
    np.testing.assert_allclose(sol.gamma_hat, [0.0, 1.0], atol=1e-12)


def test_two_sided_hand_solution():
    sol = solve_primal_dual(NormalModel([1.0, 1.0], [[1.0], [-1.0]], np.eye(2)))
    assert sol.eta_hat == pytest.approx(1.0)
    np.testing.assert_allclose(sol.delta_hat, [0.0], atol=1e-12)
    np.testing.assert_allclose(sol.gamma_hat, [0.5, 0.5], atol=1e-12)
    assert sol.binding_set == (0, 1)
    assert sol.vertex_ok


def test_negative_column_is_trivial_null():
    sol = solve_primal_dual(NormalModel([3.0, 4.0], [[-1.0], [-1.0]], np.eye(2)))
    assert sol.status == TRIVIAL_NULL
    assert sol.eta_hat == -math.inf
    assert not sol.finite


def test_vertex_enumeration_examples():
    vs = enumerate_dual_vertices(NormalModel(np.zeros(3), np.zeros((3, 0)), np.eye(3)))
    assert sorted(tuple(np.round(v, 12)) for v in vs) == sorted(tuple(r) for r in np.eye(3))
    vs = enumerate_dual_vertices(NormalModel([1.0, 1.0], [[1.0], [-1.0]], np.eye(2)))
    assert len(vs) == 1
    np.testing.assert_allclose(vs[0], [0.5, 0.5])
    with pytest.raises(ValueError):
        enumerate_dual_vertices(NormalModel(np.zeros(21), np.zeros((21, 0)), np.eye(21)))


def test_random_5x2_matches_enumeration(rng):
    for _ in range(50):
        m = random_model(rng, 5, 1)
        sol = solve_primal_dual(m)
        vs = enumerate_dual_vertices(m)
        if sol.status == TRIVIAL_NULL:
            assert not vs
            continue
        assert abs(sol.eta_hat - max(v @ m.y_n for v in vs)) <= 1e-8 * (1 + abs(sol.eta_hat))


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 100_000))
def test_duality_slackness_and_shift(k, p, seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, k, min(p, k - 1), unit_diag=False)
    sol = solve_primal_dual(m)
    if sol.status != OPTIMAL:
        return
    g, sd = sol.gamma_hat, m.sd
    tol = 1e-8 * (1 + abs(sol.eta_hat))
    assert g.min() >= -1e-10
    w = np.column_stack([sd, m.x_n])
    e1 = np.zeros(m.p + 1)
    e1[0] = 1.0
    np.testing.assert_allclose(w.T @ g, e1, atol=1e-9)
    assert abs(g @ m.y_n - sol.eta_hat) <= tol
    # primal feasibility and complementary slackness
    t = (m.y_n - m.x_n @ sol.delta_hat) / sd
    assert t.max() <= sol.eta_hat + 1e-8 * (1 + abs(sol.eta_hat))
    for j in np.flatnonzero(g * sd > 1e-7):
        assert abs(t[j] - sol.eta_hat) <= 1e-7 * (1 + abs(sol.eta_hat))
    if sol.vertex_ok:
        assert np.sum(g * sd > 1e-9) == m.p + 1
        assert set(np.flatnonzero(g * sd > 1e-9)) <= set(sol.binding_set)
    # adding X delta to Y leaves the value unchanged
    shifted = solve_primal_dual(m.with_y(m.y_n + m.x_n @ rng.normal(size=m.p)))
    assert abs(shifted.eta_hat - sol.eta_hat) <= 1e-8 * (1 + abs(sol.eta_hat))


def test_warm_start_matches_cold(rng):
    m = random_model(rng, 12, 3)
    poly = DualPolytope.from_model(m)
    first = poly.solve(m.y_n)
    for _ in range(20):
        y = rng.normal(size=12)
        warm = poly.solve(y, first.basis)
        cold = solve_primal_dual(m.with_y(y))
        assert warm.status == cold.status
        if warm.status == OPTIMAL:
            assert warm.eta_hat == pytest.approx(cold.eta_hat, abs=1e-9)


def test_degenerate_duplicate_rows():
    m = NormalModel([1.0, 1.0, 0.0], [[1.0], [1.0], [-1.0]], np.eye(3))
    sol = solve_primal_dual(m)
    assert sol.eta_hat == pytest.approx(0.5)
    assert not sol.vertex_ok or np.sum(sol.gamma_hat > 1e-9) == 2


def test_standard_form_with_redundant_rows():
    a = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    lp = StandardFormLP(a, np.array([1.0, 2.0]))
    res = lp.maximize(np.array([1.0, 3.0, 2.0]))
    assert res.status == OPTIMAL
    assert res.value == pytest.approx(3.0)
    inconsistent = StandardFormLP(a, np.array([1.0, 3.0]))
    assert not inconsistent.feasible


def test_linear_objective_two_sided():
    m = NormalModel([0.0, 0.0], [[1.0], [-1.0]], np.eye(2))
    assert max_linear_objective(m, np.array([1.0]), 1.645, "max") == pytest.approx(1.645)
    assert max_linear_objective(m, np.array([1.0]), 1.645, "min") == pytest.approx(-1.645)
    assert max_linear_objective(m, np.array([2.0]), 1.645, "max") == pytest.approx(3.29)
    with pytest.raises(EmptyFeasibleSet):
        max_linear_objective(m.with_y([5.0, 5.0]), np.array([1.0]), 1.0)


def test_linear_objective_unbounded():
    m = NormalModel([0.0, 0.0], [[1.0], [1.0]], np.eye(2))
    assert max_linear_objective(m, np.array([1.0]), 1.0, "max") == math.inf
    assert max_linear_objective(m, np.array([1.0]), 1.0, "min") == pytest.approx(-1.0)
