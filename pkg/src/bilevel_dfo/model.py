"""Linear interpolation models for least-squares residuals.

The model of the residual vector around the centre ``z^0`` is
``M(s) = c + J s`` with ``J`` fitted through ``d + 1`` interpolation points,
and the objective model is ``m(s) = ||M(s)||^2 = f0 + g^T s + s^T H s / 2``
with ``g = 2 J^T c`` and ``H = 2 J^T J``. Residuals are taken as given, so a
``1/n`` normalisation is expected to be folded into them already.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import GeometryError

CONDITION_LIMIT = 1e12
LAMBDA_MAX = 100.0


class InterpSet:
    """``d + 1`` points (row 0 is the centre) with residuals, accuracies and optional payloads."""

    def __init__(self, points, residuals, accuracy=None, payload=None):
        self.points = np.array(points, dtype=float, ndmin=2)
        self.residuals = np.array(residuals, dtype=float, ndmin=2)
        npt, d = self.points.shape
        if npt != d + 1:
            raise ValueError(f"need d + 1 = {d + 1} points, got {npt}")
        if self.residuals.shape[0] != npt:
            raise ValueError("one residual vector per point is required")
        self.accuracy = np.zeros(npt) if accuracy is None else np.array(accuracy, dtype=float)
        self.payload = [None] * npt if payload is None else list(payload)
        self.age = np.zeros(npt, dtype=int)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def center(self):
        return self.points[0]

    def copy(self) -> "InterpSet":
        out = InterpSet(self.points.copy(), self.residuals.copy(), self.accuracy.copy(), list(self.payload))
        out.age = self.age.copy()
        return out

    def displacements(self, center=None):
        c = self.center if center is None else np.asarray(center, dtype=float)
        return self.points[1:] - c

    def condition(self) -> float:
        return float(np.linalg.cond(self.displacements()))

    def distances(self, center=None):
        c = self.center if center is None else np.asarray(center, dtype=float)
        return np.linalg.norm(self.points - c, axis=1)

    def replace(self, t, point, residual, accuracy=0.0, payload=None):
        self.points[t] = point
        self.residuals[t] = residual
        self.accuracy[t] = accuracy
        self.payload[t] = payload
        self.age += 1
        self.age[t] = 0

    def update(self, t, residual, accuracy, payload=None):
        """Replace the value stored at point ``t`` (e.g. after a more accurate evaluation)."""
        self.residuals[t] = residual
        self.accuracy[t] = accuracy
        self.payload[t] = payload

    def make_center(self, t):
        if t == 0:
            return
        for arr in (self.points, self.residuals):
            arr[[0, t]] = arr[[t, 0]]
        self.accuracy[[0, t]] = self.accuracy[[t, 0]]
        self.age[[0, t]] = self.age[[t, 0]]
        self.payload[0], self.payload[t] = self.payload[t], self.payload[0]


@dataclass
class LocalModel:
    J: np.ndarray
    c: np.ndarray
    Delta: float = float("nan")
    condition: float = 1.0
    g: np.ndarray = field(init=False)
    H: np.ndarray = field(init=False)

    def __post_init__(self):
        self.g = 2.0 * self.J.T @ self.c
        self.H = 2.0 * self.J.T @ self.J
        self.H = 0.5 * (self.H + self.H.T)

    @property
    def f0(self) -> float:
        return float(self.c @ self.c)

    def residual_model(self, s):
        return self.c + self.J @ np.asarray(s, dtype=float)

    def value(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            r = self.residual_model(s)
            return float(r @ r)
        r = self.c + s @ self.J.T
        return np.sum(r * r, axis=-1)

    def quadratic_value(self, s):
        s = np.asarray(s, dtype=float)
        return self.f0 + s @ self.g + 0.5 * np.einsum("...i,ij,...j->...", s, self.H, s)


def _factor(iset: InterpSet):
    W = iset.displacements()
    cond = float(np.linalg.cond(W))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise GeometryError(f"interpolation displacements ill-conditioned (cond={cond:.3g})")
    return W, cond


def fit(iset: InterpSet, Delta: float = float("nan")) -> LocalModel:
    """Solve ``W g_i = r_i(z^t) - r_i(z^0)`` for every residual; ``W`` has rows ``z^t - z^0``."""
    W, cond = _factor(iset)
    rhs = iset.residuals[1:] - iset.residuals[0]
    JT = np.linalg.solve(W, rhs)
    return LocalModel(JT.T.copy(), iset.residuals[0].copy(), Delta, cond)


def lagrange_coefficients(iset: InterpSet, center=None):
    """Return ``(a, B)`` with ``l_t(center + s) = a[t] + B[:, t] @ s`` for ``t = 0..d``."""
    W, _ = _factor(iset)
    Binv = np.linalg.inv(W)  # column t-1 is the gradient of l_t, t >= 1
    B = np.empty((iset.d, iset.d + 1))
    B[:, 1:] = Binv
    B[:, 0] = -Binv.sum(axis=1)
    c = iset.center if center is None else np.asarray(center, dtype=float)
    s = c - iset.center
    a = np.empty(iset.d + 1)
    a[1:] = s @ Binv
    a[0] = 1.0 - a[1:].sum()
    return a, B


def maximize_linear(b, Delta, lo=None, hi=None):
    """Maximiser of ``b^T s`` over ``||s|| <= Delta`` intersected with ``lo <= s <= hi``.

    The Lagrangian separates, so the maximiser is ``clip(tau b, lo, hi)`` for
    the ``tau >= 0`` that puts it on the sphere (or the far box corner).
    """
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    if lo is None and hi is None:
        return Delta * b / nb
    lo = np.full_like(b, -np.inf) if lo is None else np.asarray(lo, dtype=float)
    hi = np.full_like(b, np.inf) if hi is None else np.asarray(hi, dtype=float)
    corner = np.where(b > 0, hi, np.where(b < 0, lo, 0.0))
    if np.all(np.isfinite(corner)) and np.linalg.norm(corner) <= Delta:
        return corner
    tau_lo, tau_hi = 0.0, Delta / nb
    while np.linalg.norm(np.clip(tau_hi * b, lo, hi)) < Delta:
        tau_hi *= 2.0
    for _ in range(200):
        tau = 0.5 * (tau_lo + tau_hi)
        if np.linalg.norm(np.clip(tau * b, lo, hi)) > Delta:
            tau_hi = tau
        else:
            tau_lo = tau
        if tau_hi - tau_lo <= 1e-15 * tau_hi:
            break
    return np.clip(tau_lo * b, lo, hi)


def _ball_extremes(a, b, Delta, lo, hi):
    """Max of ``|a + b^T s|`` over the (box-restricted) ball and the step attaining it."""
    if lo is None and hi is None:
        nb = np.linalg.norm(b)
        step = Delta * b / nb if nb > 0 else np.zeros_like(b)
        if a >= 0:
            return abs(a) + Delta * nb, step
        return abs(a) + Delta * nb, -step
    s_plus = maximize_linear(b, Delta, lo, hi)
    s_minus = maximize_linear(-b, Delta, lo, hi)
    v_plus = abs(a + b @ s_plus)
    v_minus = abs(a + b @ s_minus)
    return (v_plus, s_plus) if v_plus >= v_minus else (v_minus, s_minus)


@dataclass
class PoisednessReport:
    Lambda: float
    worst: int
    maxima: np.ndarray
    maximizers: np.ndarray


def lagrange_poisedness(iset: InterpSet, center=None, Delta: float = 1.0, lo=None, hi=None) -> PoisednessReport:
    """``Lambda = max_t max_{||s|| <= Delta} |l_t(center + s)|``.

    ``lo``/``hi`` optionally restrict ``s`` to a box (displacements from
    ``center``); without them the closed form ``|a_t| + Delta ||b_t||`` is used.
    """
    c = iset.center if center is None else np.asarray(center, dtype=float)
    a, B = lagrange_coefficients(iset, c)
    maxima = np.empty(iset.d + 1)
    steps = np.empty((iset.d + 1, iset.d))
    for t in range(iset.d + 1):
        maxima[t], steps[t] = _ball_extremes(a[t], B[:, t], Delta, lo, hi)
    worst = int(np.argmax(maxima))
    return PoisednessReport(float(maxima[worst]), worst, maxima, c + steps)


def improve_geometry(iset: InterpSet, center, Delta: float, Lambda_max: float, oracle, lo=None, hi=None,
                     max_replacements: int | None = None):
    """Greedy Lagrange-maximiser replacement until the set is ``Lambda_max``-poised.

    ``oracle(point)`` returns ``(residual, accuracy, payload)``. The centre
    ``z^0`` is never replaced. Each replacement multiplies the interpolation
    determinant by the replaced polynomial's ball maximum, so the loop
    terminates whenever that maximum exceeds one. Returns the improved copy
    and the number of oracle calls.
    """
    if not Lambda_max > 1.0:
        raise ValueError("Lambda_max must exceed 1")
    out = iset.copy()
    cap = 10 * (iset.d + 1) if max_replacements is None else max_replacements
    calls = 0
    while calls < cap:
        rep = lagrange_poisedness(out, center, Delta, lo, hi)
        if rep.Lambda <= Lambda_max:
            break
        t = 1 + int(np.argmax(rep.maxima[1:]))
        if rep.maxima[t] <= 1.0 + 1e-12:
            break
        point = rep.maximizers[t]
        residual, accuracy, payload = oracle(point)
        out.replace(t, point, residual, accuracy, payload)
        calls += 1
    return out, calls


def ball_radius_tol(Delta: float, center, rtol: float = 1e-10) -> float:
    """``Delta`` widened by ``rtol`` and by the rounding in ``||(c + s) - c||``."""
    scale = 1.0 + float(np.max(np.abs(center))) if np.size(center) else 1.0
    return Delta * (1.0 + rtol) + 16.0 * np.finfo(float).eps * scale


def is_fully_linear(iset: InterpSet, Delta: float, Lambda_max: float = LAMBDA_MAX, accuracy_limit=None,
                    lo=None, hi=None, rtol: float = 1e-10) -> bool:
    """Points inside ``B(z^0, Delta)``, ``Lambda_max``-poised there, evaluations accurate enough."""
    if np.any(iset.distances() > ball_radius_tol(Delta, iset.center, rtol)):
        return False
    if accuracy_limit is not None and np.any(iset.accuracy > accuracy_limit * (1.0 + rtol)):
        return False
    try:
        return lagrange_poisedness(iset, None, Delta, lo, hi).Lambda <= Lambda_max
    except GeometryError:
        return False
