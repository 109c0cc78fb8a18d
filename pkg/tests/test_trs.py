import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_dfo import trs


def test_interior_newton_step():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([0.1, -0.2])
    sol = trs.solve_trs(g, H, 10.0)
    np.testing.assert_allclose(sol.s, -np.linalg.solve(H, g))
    assert not sol.on_boundary
    assert sol.predicted_decrease == pytest.approx(trs.model_decrease(g, H, sol.s))


def test_boundary_solution_satisfies_optimality():
    H = np.diag([1.0, -2.0, 3.0])
    g = np.array([1.0, 1.0, 1.0])
    sol = trs.solve_trs(g, H, 0.5)
    assert np.linalg.norm(sol.s) == pytest.approx(0.5)
    # (H + lam I) s = -g with lam >= max(0, -lambda_min)
    lam = -(g + H @ sol.s) @ sol.s / (sol.s @ sol.s)
    assert lam >= 2.0 - 1e-8
    np.testing.assert_allclose((H + lam * np.eye(3)) @ sol.s, -g, atol=1e-8)


def test_hard_case():
    H = np.diag([-1.0, 2.0])
    g = np.array([0.0, 1.0])
    sol = trs.solve_trs(g, H, 2.0)
    assert np.linalg.norm(sol.s) == pytest.approx(2.0)
    best = min(trs.model_decrease(g, H, 2.0 * np.array([np.cos(a), np.sin(a)])) for a in np.linspace(0, 2 * np.pi, 20001))
    assert sol.predicted_decrease >= best - 1e-9


def test_zero_gradient_negative_curvature():
    sol = trs.solve_trs(np.zeros(2), np.diag([-1.0, 1.0]), 1.0)
    assert sol.predicted_decrease == pytest.approx(0.5)


def test_zero_model():
    sol = trs.solve_trs(np.zeros(3), np.zeros((3, 3)), 1.0)
    assert sol.predicted_decrease == 0.0


def test_box_steps_are_feasible_and_at_least_projected_cauchy():
    rng = np.random.default_rng(5)
    for _ in range(300):
        d = int(rng.integers(1, 5))
        g = rng.standard_normal(d)
        A = rng.standard_normal((d, d))
        H = A @ A.T if rng.random() < 0.5 else 0.5 * (A + A.T)
        Delta = rng.uniform(0.05, 1.0)
        lo = -rng.uniform(0, 0.5, d)
        hi = rng.uniform(0, 0.5, d)
        sol = trs.solve_trs(g, H, Delta, (lo, hi))
        assert np.all(sol.s >= lo - 1e-12) and np.all(sol.s <= hi + 1e-12)
        assert np.linalg.norm(sol.s) <= Delta * (1 + 1e-10)
        assert sol.predicted_decrease >= -1e-14
        # best point on the projected gradient path
        best = 0.0
        for t in np.geomspace(1e-6, 10.0, 400):
            s = np.clip(-t * g, lo, hi)
            if np.linalg.norm(s) <= Delta:
                best = max(best, trs.model_decrease(g, H, s))
        assert sol.predicted_decrease >= best - 1e-9


def test_box_inactive_matches_ball():
    g = np.array([1.0, -0.5])
    H = np.eye(2)
    a = trs.solve_trs(g, H, 0.3)
    b = trs.solve_trs(g, H, 0.3, (np.full(2, -10.0), np.full(2, 10.0)))
    np.testing.assert_allclose(a.s, b.s)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 100_000), st.floats(-3, 1), st.booleans())
def test_cauchy_decrease_property(d, seed, log_delta, psd):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(d)
    A = rng.standard_normal((d, d))
    H = A @ A.T if psd else 0.5 * (A + A.T)
    Delta = 10 ** log_delta
    sol = trs.solve_trs(g, H, Delta)
    assert np.linalg.norm(sol.s) <= Delta * (1 + 1e-10)
    assert sol.predicted_decrease >= trs.cauchy_threshold(g, H, Delta) * (1 - 1e-10)


def test_cauchy_threshold_formula():
    g = np.array([3.0, 4.0])
    H = np.diag([2.0, -6.0])
    assert trs.cauchy_threshold(g, H, 10.0) == pytest.approx(0.5 * 5 * 5 / 7)
    assert trs.cauchy_threshold(g, H, 0.1) == pytest.approx(0.5 * 5 * 0.1)
