"""Gradient descent and FISTA for smooth, strongly convex lower-level problems.

A "problem" is anything exposing ``gradient(x)``, ``objective(x)`` and
``bounds`` (a :class:`~bilevel_dfo.problems.ConvexityBounds`). The iterate
may be a single vector or a stack of rows; rows are solved independently
and each row stops on its own certificate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError
from .problems import ConvexityBounds

DEFAULT_MAX_ITER = 1_000_000

STEP_INV_L = "1/L"
STEP_TWO_OVER_SUM = "2/(L+mu)"


@dataclass(frozen=True)
class FixedIterations:
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise ValueError(f"K must be a nonnegative integer, got {self.K}")


@dataclass(frozen=True)
class GradientCertified:
    """Stop once ``||grad Phi(x)|| / mu <= delta_x``, i.e. ``||x - x_hat|| <= delta_x`` is certified."""

    delta_x: float
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if not self.delta_x > 0:
            raise ValueError(f"delta_x must be positive, got {self.delta_x}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class FistaState:
    """Momentum state that lets a FISTA solve be continued on the same problem."""

    x_prev: np.ndarray
    t: np.ndarray


@dataclass
class SolveResult:
    x_tilde: np.ndarray
    iterations: np.ndarray
    grad_norm: np.ndarray
    certified_error: np.ndarray
    safeguard_tripped: np.ndarray
    state: FistaState | None = None

    @property
    def total_iterations(self) -> int:
        return int(np.sum(self.iterations))

    @property
    def certified(self) -> bool:
        return not bool(np.any(self.safeguard_tripped))


class SolverTrace:
    """Collects per-iteration ``(iteration, image, objective, grad_norm)`` rows."""

    header = ("iteration", "image", "objective", "grad_norm")

    def __init__(self, problem):
        self.problem = problem
        self.rows = []

    def __call__(self, k, x, grad_norm):
        obj = np.atleast_1d(self.problem.objective(x))
        for i, (o, g) in enumerate(zip(obj, np.atleast_1d(grad_norm))):
            self.rows.append((k, i, float(o), float(g)))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows((k, i, repr(o), repr(g)) for k, i, o, g in self.rows)


class NesterovQuadratic:
    """Nesterov's worst-case strongly convex quadratic in ``R^d``.

    ``Phi(x) = mu_hat (Q - 1) / 8 (x^T A x - 2 x_1) + mu_hat / 2 ||x||^2`` with
    ``A`` the tridiagonal ``[-1, 2, -1]`` matrix.
    """

    def __init__(self, dimension=10, mu_hat=1.0, Q=100.0):
        self.dimension = dimension
        self.mu_hat = mu_hat
        self.Q = Q
        self.A = 2.0 * np.eye(dimension) - np.eye(dimension, k=1) - np.eye(dimension, k=-1)
        self._c = mu_hat * (Q - 1.0) / 8.0
        self.hessian = 2.0 * self._c * self.A + mu_hat * np.eye(dimension)
        self.linear = np.zeros(dimension)
        self.linear[0] = -2.0 * self._c
        eig = np.linalg.eigvalsh(self.hessian)
        self.bounds = ConvexityBounds(float(eig[0]), float(eig[-1]))

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        quad = np.einsum("...i,ij,...j->...", x, self.A, x)
        return self._c * (quad - 2.0 * x[..., 0]) + 0.5 * self.mu_hat * np.sum(x * x, axis=-1)

    def gradient(self, x):
        return np.asarray(x, dtype=float) @ self.hessian + self.linear

    def minimizer(self):
        return np.linalg.solve(self.hessian, -self.linear)


def certified_error_bound(problem, x):
    """A-posteriori bound ``||grad Phi(x)|| / mu >= ||x - x_hat||``."""
    g = problem.gradient(np.asarray(x, dtype=float))
    return np.linalg.norm(g, axis=-1) / problem.bounds.mu


def _step_size(bounds, step):
    if step == STEP_INV_L:
        return 1.0 / bounds.lipschitz
    if step == STEP_TWO_OVER_SUM:
        return 2.0 / (bounds.lipschitz + bounds.mu)
    raise ValueError(f"unknown step rule {step!r}")


def _as_rows(x0):
    x = np.array(x0, dtype=float, copy=True)
    single = x.ndim == 1
    return (x[None, :] if single else x.reshape(-1, x.shape[-1])), single, x.shape


def _finish(x, single, shape, iters, gn, mu, tripped, state=None):
    out = x[0] if single else x.reshape(shape)
    if single:
        return SolveResult(out, int(iters[0]), float(gn[0]), float(gn[0] / mu), bool(tripped[0]), state)
    lead = shape[:-1]
    return SolveResult(out, iters.reshape(lead), gn.reshape(lead), (gn / mu).reshape(lead),
                       tripped.reshape(lead), state)


def _check_finite(gn):
    if not np.all(np.isfinite(gn)):
        raise NumericalError("lower-level iteration diverged (non-finite gradient); check mu/L")


def _grad(problem, x, single, shape):
    # problems see the caller's shape so batched data lines up with the rows
    if single:
        return problem.gradient(x[0])[None, :]
    return problem.gradient(x.reshape(shape)).reshape(x.shape)


def gd_solve(problem, x0, stop, step: str = STEP_INV_L, callback=None) -> SolveResult:
    """Gradient descent ``x <- x - tau grad Phi(x)`` with ``tau = 1/L`` or ``2/(L + mu)``."""
    bounds = problem.bounds
    mu = bounds.mu
    tau = _step_size(bounds, step)
    x, single, shape = _as_rows(x0)
    m = x.shape[0]
    iters = np.zeros(m, dtype=np.int64)
    tripped = np.zeros(m, dtype=bool)

    if isinstance(stop, FixedIterations):
        for k in range(stop.K):
            g = _grad(problem, x, single, shape)
            if callback is not None:
                callback(k, _view(x, single, shape), np.linalg.norm(g, axis=-1))
            x -= tau * g
        iters[:] = stop.K
        g = _grad(problem, x, single, shape)
        gn = np.linalg.norm(g, axis=-1)
        _check_finite(gn)
        if callback is not None:
            callback(stop.K, _view(x, single, shape), gn)
        return _finish(x, single, shape, iters, gn, mu, tripped)

    threshold = stop.delta_x * mu
    k = 0
    while True:
        g = _grad(problem, x, single, shape)
        gn = np.linalg.norm(g, axis=-1)
        _check_finite(gn)
        if callback is not None:
            callback(k, _view(x, single, shape), gn)
        active = gn > threshold
        tripped = active & (iters >= stop.max_iter)
        active &= ~tripped
        if not active.any():
            break
        if active.all():
            x -= tau * g
        else:
            x[active] -= tau * g[active]
        iters += active
        k += 1
    return _finish(x, single, shape, iters, gn, mu, tripped)


def _view(x, single, shape):
    return x[0] if single else x.reshape(shape)


def fista_solve(problem, x0, stop, state: FistaState | None = None, callback=None) -> SolveResult:
    """FISTA for strongly convex smooth problems with ``tau = 1/L`` and ``q = tau mu``.

    Pass the ``state`` of a previous result on the *same* problem to continue
    that run (momentum included) instead of restarting from ``t_0 = 0``.
    """
    bounds = problem.bounds
    mu = bounds.mu
    tau = 1.0 / bounds.lipschitz
    q = tau * mu
    x, single, shape = _as_rows(x0)
    m = x.shape[0]
    if state is None:
        x_prev = x.copy()
        t = np.zeros(m)
    else:
        x_prev = np.array(state.x_prev, dtype=float).reshape(x.shape)
        t = np.array(state.t, dtype=float).reshape(m)
    iters = np.zeros(m, dtype=np.int64)
    tripped = np.zeros(m, dtype=bool)

    def advance(rows):
        nonlocal x, x_prev, t
        a = 1.0 - q * t * t
        t_new = 0.5 * (a + np.sqrt(a * a + 4.0 * t * t))
        if q < 1.0:
            beta = (t - 1.0) * (1.0 - t_new * q) / (t_new * (1.0 - q))
        else:
            beta = np.zeros(m)
        z = x + beta[:, None] * (x - x_prev)
        x_new = z - tau * _grad(problem, z, single, shape)
        if rows is None:
            x_prev, x, t = x, x_new, t_new
        else:
            x_prev = np.where(rows[:, None], x, x_prev)
            x = np.where(rows[:, None], x_new, x)
            t = np.where(rows, t_new, t)

    if isinstance(stop, FixedIterations):
        for k in range(stop.K):
            if callback is not None:
                g = _grad(problem, x, single, shape)
                callback(k, _view(x, single, shape), np.linalg.norm(g, axis=-1))
            advance(None)
        iters[:] = stop.K
        gn = np.linalg.norm(_grad(problem, x, single, shape), axis=-1)
        _check_finite(gn)
        if callback is not None:
            callback(stop.K, _view(x, single, shape), gn)
        return _finish(x, single, shape, iters, gn, mu, tripped, FistaState(x_prev, t))

    threshold = stop.delta_x * mu
    k = 0
    while True:
        gn = np.linalg.norm(_grad(problem, x, single, shape), axis=-1)
        _check_finite(gn)
        if callback is not None:
            callback(k, _view(x, single, shape), gn)
        active = gn > threshold
        tripped = active & (iters >= stop.max_iter)
        active &= ~tripped
        if not active.any():
            break
        advance(None if active.all() else active)
        iters += active
        k += 1
    return _finish(x, single, shape, iters, gn, mu, tripped, FistaState(x_prev, t))


SOLVERS = {"gd": gd_solve, "fista": fista_solve}


def solve(kind, problem, x0, stop, state=None, **kwargs) -> SolveResult:
    """Dispatch to ``gd`` or ``fista``; ``state`` is only meaningful for FISTA."""
    if kind == "gd":
        return gd_solve(problem, x0, stop, **kwargs)
    if kind == "fista":
        return fista_solve(problem, x0, stop, state=state, **kwargs)
    raise ValueError(f"unknown solver {kind!r}")
