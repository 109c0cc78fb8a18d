"""Inexact upper-level least-squares oracle.

For parameters ``theta`` the residuals are ``r_i = ||x_i(theta) - x_i||`` where
``x_i(theta)`` is a certified approximate lower-level minimiser, plus an
optional exactly computed regulariser entry ``sqrt(J(theta))``. The objective
is ``f = (1/n) sum_i r_i^2 + J`` and its error is bounded by
``2 sqrt(f~) delta_x + delta_x^2`` when every reconstruction is within
``delta_x`` of its true minimiser.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import solvers
from .exceptions import CertificationError
from .problems import (LOG_ALPHA_NU_XI, MRI_WEIGHTS, ParamMap, condition_penalty, idft,
                       instantiate)
from .solvers import FistaState, FixedIterations, GradientCertified

CONDITION = "condition"
L1 = "l1"


@dataclass(frozen=True)
class Regularizer:
    kind: str
    beta: float

    def __post_init__(self):
        if self.kind not in (CONDITION, L1):
            raise ValueError(f"unknown regulariser {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def value(self, pmap: ParamMap, theta, n_pixels: int) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.kind == CONDITION:
            return condition_penalty(pmap, theta, self.beta, n_pixels)
        return self.beta * float(np.sum(np.abs(theta)))

    def residual(self, pmap, theta, n_pixels) -> float:
        return math.sqrt(self.value(pmap, theta, n_pixels))


@dataclass(eq=False)
class TrainingSet:
    """Ground truths ``x`` and measurements ``y`` (one row per image) with the parameter map."""

    x_true: np.ndarray
    y: np.ndarray
    pmap: ParamMap
    regularizer: Regularizer | None = None

    def __post_init__(self):
        self.x_true = np.atleast_2d(np.asarray(self.x_true, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y))
        if self.x_true.shape != self.y.shape:
            raise ValueError("x_true and y must have the same shape (n, N)")
        if self.regularizer is not None and self.regularizer.kind == CONDITION \
                and self.pmap.variant != LOG_ALPHA_NU_XI:
            raise ValueError("condition-number penalty needs the 3-parameter denoising map")

    @property
    def n(self) -> int:
        return self.x_true.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.x_true.shape[1]

    @property
    def kind(self) -> str:
        return "mri" if self.pmap.variant == MRI_WEIGHTS else "denoise"

    def initial_guess(self):
        if self.pmap.variant == MRI_WEIGHTS:
            return idft(self.y).real
        return self.y.real.astype(float).copy()

    def instance(self, theta, rows=None):
        y = self.y if rows is None else self.y[rows]
        return instantiate(self.pmap, theta, y)


class WarmStartCache:
    """Most recent reconstruction per image, regardless of the ``theta`` that produced it."""

    def __init__(self, x0):
        self.x = np.array(x0, dtype=float, copy=True)

    def get(self):
        return self.x.copy()

    def update(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.x.shape:
            raise ValueError("cache entries must keep the image shape")
        self.x = x.copy()


@dataclass(eq=False)
class ResidualEval:
    theta: np.ndarray
    r_tilde: np.ndarray
    delta_r: np.ndarray
    f_tilde: float
    delta_f: float
    lower_iters: int
    x_tilde: np.ndarray = field(repr=False)
    n: int = 0
    certified: bool = True
    iterations: np.ndarray | None = field(default=None, repr=False)
    state: FistaState | None = field(default=None, repr=False)

    @property
    def delta_x(self) -> float:
        return float(np.max(self.delta_r[: self.n])) if self.n else 0.0

    @property
    def scaled(self):
        """Residuals scaled so that ``f~ = ||scaled||^2``."""
        out = self.r_tilde.copy()
        out[: self.n] /= math.sqrt(self.n)
        return out

    @property
    def scaled_delta(self):
        out = self.delta_r.copy()
        out[: self.n] /= math.sqrt(self.n)
        return out


def delta_f_bound(f_tilde: float, delta_x: float) -> float:
    return 2.0 * math.sqrt(max(f_tilde, 0.0)) * delta_x + delta_x * delta_x


def required_delta_x(f_tilde: float, delta_f: float) -> float:
    """Largest ``delta_x`` with ``2 sqrt(f~) delta_x + delta_x^2 <= delta_f``."""
    f_tilde = max(f_tilde, 0.0)
    # sqrt(f + d) - sqrt(f) written without cancellation
    return delta_f / (math.sqrt(f_tilde + delta_f) + math.sqrt(f_tilde))


def _assemble(tset: TrainingSet, theta, x_tilde, errors, iterations, certified, state):
    r = np.linalg.norm(x_tilde - tset.x_true, axis=-1)
    delta_r = np.asarray(errors, dtype=float).reshape(tset.n).copy()
    if tset.regularizer is not None:
        r = np.append(r, tset.regularizer.residual(tset.pmap, theta, tset.n_pixels))
        delta_r = np.append(delta_r, 0.0)
    n = tset.n
    f = float(np.sum(r[:n] ** 2) / n + np.sum(r[n:] ** 2))
    dx = float(np.max(delta_r[:n]))
    iterations = np.asarray(iterations).reshape(n)
    return ResidualEval(np.atleast_1d(np.array(theta, dtype=float)), r, delta_r, f, delta_f_bound(f, dx),
                        int(np.sum(iterations)), x_tilde, n, bool(certified), iterations, state)


def _same_theta(ev, theta):
    return ev is not None and np.array_equal(ev.theta, np.atleast_1d(np.asarray(theta, dtype=float)))


def _run(tset, theta, x0, stop, solver, state, threads):
    if threads <= 1 or tset.n == 1:
        inst = tset.instance(theta)
        return solvers.solve(solver, inst, x0, stop, state=state)
    chunks = np.array_split(np.arange(tset.n), min(threads, tset.n))

    def work(rows):
        sub_state = None if state is None else FistaState(state.x_prev[rows], state.t[rows])
        return solvers.solve(solver, tset.instance(theta, rows), x0[rows], stop, state=sub_state)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(work, chunks))
    # fixed-order reduction so results do not depend on scheduling
    res = solvers.SolveResult(
        np.concatenate([p.x_tilde for p in parts]),
        np.concatenate([p.iterations for p in parts]),
        np.concatenate([p.grad_norm for p in parts]),
        np.concatenate([p.certified_error for p in parts]),
        np.concatenate([p.safeguard_tripped for p in parts]),
    )
    if solver == "fista":
        res.state = FistaState(np.concatenate([p.state.x_prev for p in parts]),
                               np.concatenate([p.state.t for p in parts]))
    return res


def evaluate_to_x_accuracy(tset: TrainingSet, theta, delta_x: float, cache: WarmStartCache,
                           solver: str = "fista", previous: ResidualEval | None = None,
                           max_iter: int = solvers.DEFAULT_MAX_ITER, threads: int = 1) -> ResidualEval:
    """Solve every lower-level problem until ``||x~_i - x_hat_i|| <= delta_x`` is certified.

    With ``previous`` at the same ``theta`` the solves continue from its
    reconstructions (and FISTA momentum); otherwise they warm-start from the
    cache. The cache is updated once all images are done.
    """
    if _same_theta(previous, theta):
        x0, state = previous.x_tilde, previous.state
    else:
        x0, state = cache.get(), None
    res = _run(tset, theta, x0, GradientCertified(delta_x, max_iter), solver, state, threads)
    ev = _assemble(tset, theta, res.x_tilde, res.certified_error, res.iterations, res.certified, res.state)
    cache.update(res.x_tilde)
    return ev


def evaluate_to_f_accuracy(tset: TrainingSet, theta, delta_f_target: float, cache: WarmStartCache,
                           solver: str = "fista", previous: ResidualEval | None = None,
                           delta_x0: float | None = None, max_iter: int = solvers.DEFAULT_MAX_ITER,
                           threads: int = 1) -> ResidualEval:
    """Tighten ``delta_x`` (halving, solves continued) until ``delta_f <= delta_f_target``.

    ``lower_iters`` of the result counts the work done in this call only.
    """
    if not delta_f_target > 0:
        raise ValueError("delta_f_target must be positive")
    if _same_theta(previous, theta):
        if previous.delta_f <= delta_f_target:
            out = _copy_eval(previous)
            out.lower_iters = 0
            return out
        dx = min(required_delta_x(previous.f_tilde, delta_f_target), previous.delta_x)
        ev = previous
    else:
        dx = delta_x0 if delta_x0 is not None else math.sqrt(delta_f_target)
        ev = None
    total = 0
    while True:
        ev = evaluate_to_x_accuracy(tset, theta, dx, cache, solver, previous=ev, max_iter=max_iter,
                                    threads=threads)
        total += ev.lower_iters
        if ev.delta_f <= delta_f_target or not ev.certified:
            break
        dx = min(0.5 * dx, ev.delta_x)
    ev.lower_iters = total
    return ev


def fixed_iteration_evaluate(tset: TrainingSet, theta, K: int, cache: WarmStartCache,
                             solver: str = "fista", threads: int = 1) -> ResidualEval:
    """Run exactly ``K`` iterations per image from the warm start; bounds come from the certificate."""
    res = _run(tset, theta, cache.get(), FixedIterations(K), solver, None, threads)
    ev = _assemble(tset, theta, res.x_tilde, res.certified_error, res.iterations, True, res.state)
    cache.update(res.x_tilde)
    return ev


def _copy_eval(ev: ResidualEval) -> ResidualEval:
    return ResidualEval(ev.theta.copy(), ev.r_tilde.copy(), ev.delta_r.copy(), ev.f_tilde, ev.delta_f,
                        ev.lower_iters, ev.x_tilde, ev.n, ev.certified, ev.iterations, ev.state)


DYNAMIC = "dynamic"
FIXED = "fixed"


class BilevelOracle:
    """Stateful evaluator used by the trust-region driver.

    ``mode="dynamic"`` honours accuracy requests; ``mode="fixed"`` runs ``K``
    iterations per evaluation and ignores them. Every call is logged with
    the evaluation index, the work it consumed and the running total.
    """

    log_header = ("eval", "phase", "theta", "f_tilde", "delta_f", "lower_iters", "cumulative_lower_iters")

    def __init__(self, tset: TrainingSet, solver: str = "fista", mode: str = DYNAMIC, K: int | None = None,
                 max_iter: int = solvers.DEFAULT_MAX_ITER, threads: int = 1):
        if mode not in (DYNAMIC, FIXED):
            raise ValueError(f"unknown oracle mode {mode!r}")
        if mode == FIXED and K is None:
            raise ValueError("fixed mode needs K")
        if solver not in solvers.SOLVERS:
            raise ValueError(f"unknown solver {solver!r}")
        self.tset = tset
        self.solver = solver
        self.mode = mode
        self.K = K
        self.max_iter = max_iter
        self.threads = threads
        self.cache = WarmStartCache(tset.initial_guess())
        self.n_evals = 0
        self.cumulative_iters = 0
        self.log = []

    @property
    def dynamic(self) -> bool:
        return self.mode == DYNAMIC

    def _record(self, phase, ev):
        self.cumulative_iters += ev.lower_iters
        self.log.append((self.n_evals, phase, ev.theta.tolist(), ev.f_tilde, ev.delta_f, ev.lower_iters,
                         self.cumulative_iters))
        if not ev.certified:
            raise CertificationError(
                f"lower-level safeguard ({self.max_iter} iterations) tripped at theta={ev.theta.tolist()}")
        return ev

    def evaluate(self, theta, delta_x: float) -> ResidualEval:
        """Evaluate at a new point (one upper-level evaluation)."""
        self.n_evals += 1
        if self.dynamic:
            ev = evaluate_to_x_accuracy(self.tset, theta, delta_x, self.cache, self.solver,
                                        max_iter=self.max_iter, threads=self.threads)
        else:
            ev = fixed_iteration_evaluate(self.tset, theta, self.K, self.cache, self.solver, self.threads)
        return self._record("new", ev)

    def refine_x(self, ev: ResidualEval, delta_x: float) -> ResidualEval:
        """Continue the solves behind ``ev`` until ``delta_x`` is certified (not a new evaluation)."""
        if not self.dynamic or ev.delta_x <= delta_x:
            return ev
        new = evaluate_to_x_accuracy(self.tset, ev.theta, delta_x, self.cache, self.solver, previous=ev,
                                     max_iter=self.max_iter, threads=self.threads)
        return self._record("refine", new)

    def refine_f(self, ev: ResidualEval, delta_f: float) -> ResidualEval:
        """Continue the solves behind ``ev`` until ``delta_f`` is certified (not a new evaluation)."""
        if not self.dynamic or ev.delta_f <= delta_f:
            return ev
        new = evaluate_to_f_accuracy(self.tset, ev.theta, delta_f, self.cache, self.solver, previous=ev,
                                     max_iter=self.max_iter, threads=self.threads)
        return self._record("refine", new)


class ReferenceOracle:
    """High-accuracy shadow evaluator; its work is not charged to any run."""

    def __init__(self, tset: TrainingSet, delta_x: float = 1e-10, solver: str = "fista"):
        self.tset = tset
        self.delta_x = delta_x
        self.solver = solver
        self.cache = WarmStartCache(tset.initial_guess())

    def __call__(self, theta) -> ResidualEval:
        return evaluate_to_x_accuracy(self.tset, theta, self.delta_x, self.cache, self.solver)
