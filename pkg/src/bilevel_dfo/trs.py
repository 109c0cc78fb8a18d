"""Trust-region subproblem ``min g^T s + s^T H s / 2`` s.t. ``||s|| <= Delta`` (and a box).

The ball problem is solved in the eigenbasis of ``H`` by safeguarded Newton
iteration on the secular equation ``1/Delta - 1/||s(lam)|| = 0`` with
``s(lam) = -(H + lam I)^{-1} g``, including the hard case. With a box
``lo <= s <= hi`` (``lo <= 0 <= hi``) the returned step is the best of a few
feasible candidates, one of which is the projected Cauchy point, so the
step never does worse than projected steepest descent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NEWTON_MAX_ITER = 200
PSD_SHIFT = 1e-12


@dataclass
class TrsSolution:
    s: np.ndarray
    predicted_decrease: float
    on_boundary: bool
    regularized: bool = False
    method: str = "ball"


def model_decrease(g, H, s) -> float:
    """``m(0) - m(s)`` for ``m(s) = g^T s + s^T H s / 2``."""
    return float(-(g @ s) - 0.5 * (s @ H @ s))


def cauchy_threshold(g, H, Delta) -> float:
    """``||g|| min(Delta, ||g|| / (||H|| + 1)) / 2``."""
    gn = float(np.linalg.norm(g))
    hn = float(np.max(np.abs(np.linalg.eigvalsh(H)))) if H.size else 0.0
    return 0.5 * gn * min(Delta, gn / (hn + 1.0))


def _ball(g, evals, evecs, Delta):
    gt = evecs.T @ g
    lmin = float(evals[0])
    scale = max(1.0, float(np.max(np.abs(evals))))

    def step(lam):
        return -(gt / (evals + lam))

    if lmin > 0:
        s0 = step(0.0)
        if np.linalg.norm(s0) <= Delta:
            return evecs @ s0, False

    lam_lo = max(0.0, -lmin)
    # hard case: g has no component along the bottom eigenspace and the
    # shifted step stays strictly inside the ball
    bottom = np.abs(evals - lmin) <= 1e-10 * scale
    gnorm = float(np.linalg.norm(g))
    if lmin <= 0 and np.all(np.abs(gt[bottom]) <= 1e-12 * max(gnorm, 1.0)):
        st = np.zeros_like(gt)
        rest = ~bottom
        st[rest] = -gt[rest] / (evals[rest] + lam_lo)
        ns = float(np.linalg.norm(st))
        if ns <= Delta:
            st[np.flatnonzero(bottom)[0]] += math.sqrt(max(Delta * Delta - ns * ns, 0.0))
            return evecs @ st, True

    lam_hi = max(lam_lo, gnorm / Delta - lmin) + 1e-300
    lam = lam_hi
    for _ in range(NEWTON_MAX_ITER):
        d = evals + lam
        if np.any(d <= 0):
            lam = 0.5 * (lam_lo + lam_hi)
            continue
        s = gt / d
        ns = float(np.linalg.norm(s))
        if abs(ns - Delta) <= 1e-13 * Delta:
            break
        if ns < Delta:
            lam_hi = lam
        else:
            lam_lo = lam
        dns = -float(np.sum(gt * gt / d ** 3)) / ns
        psi = 1.0 / Delta - 1.0 / ns
        dpsi = dns / (ns * ns)
        lam_new = lam - psi / dpsi if dpsi != 0 else 0.5 * (lam_lo + lam_hi)
        if not (lam_lo < lam_new < lam_hi):
            lam_new = 0.5 * (lam_lo + lam_hi)
        if lam_hi - lam_lo <= 1e-15 * max(1.0, lam_hi):
            lam = lam_hi
            break
        lam = lam_new
    s = step(lam)
    ns = float(np.linalg.norm(s))
    if ns > Delta:
        s *= Delta / ns
    return evecs @ s, True


def _projected_cauchy(g, H, Delta, lo, hi):
    """Minimise the model along ``clip(-t g, lo, hi)`` inside the ball (exact on each segment)."""
    d = -np.asarray(g, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(d > 0, hi / d, np.where(d < 0, lo / d, np.inf))
    breaks = np.unique(np.concatenate([[0.0], tb[np.isfinite(tb) & (tb > 0)]]))
    breaks = np.append(breaks, np.inf)
    best_s, best_val = np.zeros_like(d), 0.0
    s_start = np.zeros_like(d)
    for t0, t1 in zip(breaks[:-1], breaks[1:]):
        free = tb > t0
        direction = np.where(free, d, 0.0)
        if not np.any(direction):
            break
        s_start = np.clip(t0 * d, lo, hi)
        # ball limit on this segment: ||s_start + u direction|| = Delta
        a = float(direction @ direction)
        b = float(2.0 * s_start @ direction)
        c = float(s_start @ s_start - Delta * Delta)
        if c > 0:
            break
        u_ball = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
        u_max = min(t1 - t0, u_ball)
        slope = float(g @ direction + s_start @ H @ direction)
        curv = float(direction @ H @ direction)
        if curv > 0:
            u = min(max(-slope / curv, 0.0), u_max)
        else:
            u = u_max if slope < 0 else 0.0
        if not np.isfinite(u):
            break
        s = s_start + u * direction
        val = -model_decrease(g, H, s)
        if val < best_val:
            best_s, best_val = s, val
        if u_max == u_ball or u < u_max:
            break
    return best_s


def _box_candidates(g, H, Delta, lo, hi, s_ball):
    out = []
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s_ball > 0, hi / s_ball, np.where(s_ball < 0, lo / s_ball, np.inf))
    t = min(1.0, float(np.min(ratio)))
    out.append(("scaled", t * s_ball))
    out.append(("clipped", np.clip(s_ball, lo, hi)))

    # active-set refinement: freeze clipped coordinates and re-solve on the rest
    s = np.clip(s_ball, lo, hi)
    for _ in range(g.size):
        at_bound = (s <= lo + 1e-15) & (s_ball < lo) | (s >= hi - 1e-15) & (s_ball > hi)
        free = ~at_bound
        if not np.any(free) or np.all(free):
            break
        fixed = np.where(free, 0.0, s)
        rem2 = Delta * Delta - float(fixed @ fixed)
        if rem2 <= 0:
            break
        gf = (g + H @ fixed)[free]
        Hf = H[np.ix_(free, free)]
        ev, Q = np.linalg.eigh(0.5 * (Hf + Hf.T))
        sub, _ = _ball(gf, ev, Q, math.sqrt(rem2))
        s_ball = fixed.copy()
        s_ball[free] = sub
        s_new = np.clip(s_ball, lo, hi)
        out.append(("active-set", s_new))
        if np.array_equal(s_new, s):
            break
        s = s_new
    out.append(("projected-cauchy", _projected_cauchy(g, H, Delta, lo, hi)))
    return out


def solve_trs(g, H, Delta: float, box=None) -> TrsSolution:
    """Approximate global minimiser of the quadratic model over the ball (intersected with ``box``).

    ``box`` is a pair ``(lo, hi)`` of displacement bounds containing 0.
    """
    g = np.asarray(g, dtype=float).ravel()
    H = np.asarray(H, dtype=float).reshape(g.size, g.size)
    if not Delta > 0:
        raise ValueError("Delta must be positive")
    H = 0.5 * (H + H.T)
    evals, evecs = np.linalg.eigh(H)
    regularized = False
    if evals[0] < 0:
        # numerically indefinite Gauss-Newton Hessian
        H = H + PSD_SHIFT * np.eye(g.size)
        evals = evals + PSD_SHIFT
        regularized = True
    if not np.any(g):
        if evals[0] >= 0:
            return TrsSolution(np.zeros_like(g), 0.0, False, regularized)
    s, boundary = _ball(g, evals, evecs, Delta)
    if box is None:
        return TrsSolution(s, max(model_decrease(g, H, s), 0.0), boundary, regularized)

    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), g.shape) for b in box)
    if np.any(lo > 0) or np.any(hi < 0):
        raise ValueError("box displacement bounds must contain 0")
    if np.all(s >= lo) and np.all(s <= hi):
        return TrsSolution(s, max(model_decrease(g, H, s), 0.0), boundary, regularized)
    best_name, best_s, best_dec = "zero", np.zeros_like(g), 0.0
    for name, cand in _box_candidates(g, H, Delta, lo, hi, s):
        nc = float(np.linalg.norm(cand))
        if nc > Delta:
            cand = cand * (Delta / nc)
        cand = np.clip(cand, lo, hi)
        dec = model_decrease(g, H, cand)
        if dec > best_dec:
            best_name, best_s, best_dec = name, cand, dec
    on_b = bool(np.linalg.norm(best_s) >= Delta * (1 - 1e-10))
    return TrsSolution(best_s, best_dec, on_b, regularized, best_name)
