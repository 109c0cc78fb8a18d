import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_dfo import problems
from bilevel_dfo.exceptions import DomainError, NumericalError
from bilevel_dfo.problems import DFT, IDENTITY, ParamMap, ProblemInstance


def _instance(op=IDENTITY, N=12, alpha=0.3, nu=0.05, xi=1e-2, weights=None, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(N)
    if op == DFT:
        data = problems.dft(data) + 0.1 * rng.standard_normal(N)
    w = np.ones(N) if weights is None else weights
    return ProblemInstance(op, w, data, alpha, nu, xi, N)


def _numeric_gradient(inst, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (inst.objective(x + e) - inst.objective(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("op", [IDENTITY, DFT])
def test_gradient_matches_finite_differences(op):
    rng = np.random.default_rng(1)
    w = rng.uniform(0.2, 3.0, 12) if op == DFT else None
    inst = _instance(op, weights=w)
    x = rng.standard_normal(12)
    np.testing.assert_allclose(problems.eval_gradient(inst, x), _numeric_gradient(inst, x), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("op", [IDENTITY, DFT])
def test_constants_bracket_the_hessian_spectrum(op):
    rng = np.random.default_rng(2)
    w = rng.uniform(0.1, 4.0, 10) if op == DFT else None
    inst = _instance(op, N=10, weights=w, alpha=0.5, nu=0.1)
    b = inst.bounds
    for _ in range(5):
        x = rng.standard_normal(10)
        h = 1e-6
        H = np.array([(inst.gradient(x + h * e) - inst.gradient(x - h * e)) / (2 * h) for e in np.eye(10)])
        eig = np.linalg.eigvalsh(0.5 * (H + H.T))
        assert eig[0] >= b.mu - 1e-5
        assert eig[-1] <= b.lipschitz + 1e-5


def test_stencil_norm_matches_dense_eigenvalue():
    for N in (2, 3, 8, 64, 200):
        D = np.diff(np.eye(N), axis=0)
        expected = np.linalg.eigvalsh(D.T @ D)[-1]
        assert problems.stencil_norm_sq(N) == pytest.approx(expected, rel=1e-9)
    assert problems.stencil_norm_sq(1) == 0.0


def test_batched_rows_match_single_rows():
    inst = _instance()
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 12))
    batched = inst.with_data(np.tile(inst.data, (4, 1)))
    np.testing.assert_allclose(batched.gradient(X), np.array([inst.gradient(x) for x in X]))
    np.testing.assert_allclose(batched.objective(X), [inst.objective(x) for x in X])


def test_instance_rejects_bad_settings():
    with pytest.raises(DomainError):
        _instance(nu=0.0)
    with pytest.raises(DomainError):
        _instance(alpha=-1.0)
    with pytest.raises(DomainError):
        _instance(xi=0.0, op=DFT, weights=np.r_[0.0, np.ones(11)])  # mu = 0
    with pytest.raises(DomainError):
        ProblemInstance("blur", np.ones(4), np.zeros(4), 1.0, 1.0, 0.0, 4)
    with pytest.raises(NumericalError):
        problems.eval_objective(_instance(), np.full(12, np.nan))
    with pytest.raises(DomainError):
        problems.eval_gradient(_instance(), np.zeros(5))


def test_parameter_maps():
    pm = ParamMap(problems.LOG_ALPHA, [-7], [7], {"nu": 1e-3, "xi": 1e-3})
    assert pm.settings([-1.0])["alpha"] == pytest.approx(0.1)
    with pytest.raises(DomainError):
        pm.settings([8.0])
    with pytest.raises(DomainError):
        pm.settings([0.0, 1.0])
    pm3 = ParamMap(problems.LOG_ALPHA_NU_XI, [-7] * 3, [7, 0, 0])
    s = pm3.settings([0.0, -1.0, -2.0])
    assert (s["alpha"], s["nu"], s["xi"]) == pytest.approx((1.0, 0.1, 0.01))
    mri = ParamMap(problems.MRI_WEIGHTS, np.full(4, 0.001), np.full(4, 0.99))
    np.testing.assert_allclose(mri.settings([0.5, 0.5, 0.9, 0.001])["weights"], [1, 1, 9, 0.001 / 0.999])
    with pytest.raises(DomainError):
        ParamMap(problems.LOG_ALPHA, [1.0], [0.0])
    with pytest.raises(DomainError):
        ParamMap("nonsense", [0.0], [1.0])


def test_mri_instance_constants_follow_weights():
    pm = ParamMap(problems.MRI_WEIGHTS, np.full(8, 0.001), np.full(8, 0.99), {"alpha": 0.01, "nu": 0.01, "xi": 1e-4})
    theta = np.linspace(0.1, 0.8, 8)
    inst = problems.instantiate(pm, theta, np.zeros(8, dtype=complex))
    w = theta / (1 - theta)
    assert inst.bounds.mu == pytest.approx(w.min() + 1e-4)
    assert inst.bounds.lipschitz == pytest.approx(w.max() + 0.01 * problems.stencil_norm_sq(8) / 0.01 + 1e-4)


def test_condition_penalty():
    pm3 = ParamMap(problems.LOG_ALPHA_NU_XI, [-7] * 3, [7, 0, 0])
    val = problems.condition_penalty(pm3, [0.0, -1.0, -1.0], 1e-6, 16)
    L = 1 + problems.stencil_norm_sq(16) / 0.1 + 0.1
    assert val == pytest.approx(1e-6 * (L / 1.1) ** 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 1), st.floats(-3, -0.5), st.integers(0, 10_000))
def test_objective_is_strongly_convex_along_segments(log_alpha, log_nu, seed):
    inst = _instance(alpha=10 ** log_alpha, nu=10 ** log_nu, seed=seed % 97)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 12))
    t = 0.3
    lhs = inst.objective(t * x + (1 - t) * y)
    rhs = t * inst.objective(x) + (1 - t) * inst.objective(y) - 0.5 * inst.bounds.mu * t * (1 - t) * np.sum((x - y) ** 2)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))
