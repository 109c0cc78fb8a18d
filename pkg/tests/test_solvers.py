import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_dfo import solvers
from bilevel_dfo.exceptions import NumericalError
from bilevel_dfo.problems import ConvexityBounds, IDENTITY, ProblemInstance


def _denoise(alpha=0.2, N=32, rows=1, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((rows, N)) if rows > 1 else rng.standard_normal(N)
    return ProblemInstance(IDENTITY, np.ones(N), data, alpha, 0.05, 1e-3, N)


@pytest.mark.parametrize("kind", ["gd", "fista"])
def test_certified_stop_meets_tolerance(kind):
    inst = _denoise()
    res = solvers.solve(kind, inst, np.zeros(32), solvers.GradientCertified(1e-8))
    assert res.certified
    assert res.certified_error <= 1e-8
    assert solvers.certified_error_bound(inst, res.x_tilde) == pytest.approx(res.certified_error)


@pytest.mark.parametrize("kind", ["gd", "fista"])
def test_fixed_iterations_are_exact(kind):
    inst = _denoise()
    seen = []
    res = solvers.solve(kind, inst, np.zeros(32), solvers.FixedIterations(17), callback=lambda k, x, g: seen.append(k))
    assert res.iterations == 17
    assert seen == list(range(18))
    res0 = solvers.solve(kind, inst, np.ones(32), solvers.FixedIterations(0))
    np.testing.assert_array_equal(res0.x_tilde, np.ones(32))


def test_gd_step_rules_differ_and_both_converge():
    inst = _denoise()
    a = solvers.gd_solve(inst, np.zeros(32), solvers.GradientCertified(1e-6))
    b = solvers.gd_solve(inst, np.zeros(32), solvers.GradientCertified(1e-6), step=solvers.STEP_TWO_OVER_SUM)
    assert a.certified and b.certified
    with pytest.raises(ValueError):
        solvers.gd_solve(inst, np.zeros(32), solvers.FixedIterations(1), step="3/L")


def test_fista_resume_equals_uninterrupted_run():
    inst = _denoise()
    full = solvers.fista_solve(inst, np.zeros(32), solvers.FixedIterations(50))
    first = solvers.fista_solve(inst, np.zeros(32), solvers.FixedIterations(20))
    second = solvers.fista_solve(inst, first.x_tilde, solvers.FixedIterations(30), state=first.state)
    np.testing.assert_allclose(second.x_tilde, full.x_tilde, rtol=0, atol=1e-13)


@pytest.mark.parametrize("kind", ["gd", "fista"])
def test_rows_stop_independently(kind):
    batched = _denoise(rows=3, seed=4)
    res = solvers.solve(kind, batched, np.zeros((3, 32)), solvers.GradientCertified(1e-7))
    for i in range(3):
        single = ProblemInstance(IDENTITY, np.ones(32), batched.data[i], 0.2, 0.05, 1e-3, 32)
        one = solvers.solve(kind, single, np.zeros(32), solvers.GradientCertified(1e-7))
        assert one.iterations == res.iterations[i]
        np.testing.assert_allclose(one.x_tilde, res.x_tilde[i], atol=1e-12)


def test_safeguard_trips_instead_of_looping():
    inst = _denoise(alpha=5.0)
    res = solvers.gd_solve(inst, np.zeros(32), solvers.GradientCertified(1e-12, max_iter=10))
    assert not res.certified
    assert res.iterations == 10


class _WrongL:
    """Quadratic ``x^2`` (curvature 2) advertised with ``L = 0.5``, so the step is too long."""

    bounds = ConvexityBounds(0.1, 0.5)

    def gradient(self, x):
        return 2.0 * x

    def objective(self, x):
        return np.sum(x * x, axis=-1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_numerical_error():
    with pytest.raises(NumericalError):
        solvers.gd_solve(_WrongL(), np.ones(3), solvers.GradientCertified(1e-8, max_iter=5000))


def test_invalid_stop_rules():
    with pytest.raises(ValueError):
        solvers.FixedIterations(-1)
    with pytest.raises(ValueError):
        solvers.GradientCertified(0.0)
    with pytest.raises(ValueError):
        solvers.solve("newton", _denoise(), np.zeros(32), solvers.FixedIterations(1))


def test_trace_csv(tmp_path):
    inst = _denoise()
    trace = solvers.SolverTrace(inst)
    solvers.fista_solve(inst, np.zeros(32), solvers.FixedIterations(3), callback=trace)
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,image,objective,grad_norm"
    assert len(lines) == 5


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 0.5), st.sampled_from(["gd", "fista"]), st.floats(-8, -2), st.integers(0, 1000))
def test_certificate_property(log_alpha, kind, log_tol, seed):
    """The a-posteriori bound is never beaten by the true error."""
    inst = _denoise(alpha=10 ** log_alpha, seed=seed)
    res = solvers.solve(kind, inst, np.zeros(32), solvers.GradientCertified(10 ** log_tol))
    ref = solvers.fista_solve(inst, res.x_tilde, solvers.GradientCertified(1e-13))
    err = np.linalg.norm(res.x_tilde - ref.x_tilde)
    assert err <= res.certified_error + ref.certified_error
