"""Dynamic-accuracy derivative-free trust-region loop for least-squares upper levels.

The loop works in box-normalised coordinates ``u = (theta - lower) / (upper - lower)``
so the feasible region is the unit cube and the trust region is a Euclidean
ball there. The oracle supplies residual vectors already scaled so that
``f~ = ||r||^2`` (see :class:`~bilevel_dfo.bilevel.ResidualEval`).

Each iteration:

1. (accuracy phase) keep tightening ``f~(theta^k)`` until its error bound is
   at most ``eta1' * predicted decrease``, re-running the criticality test and
   the step computation after every tightening;
2. evaluate the trial point to the same accuracy and form ``rho~``;
3. update ``theta`` and ``Delta`` from ``rho~`` and the fully-linear flag, then
   either insert the new point, restore full linearity or keep the model.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as mdl
from .exceptions import CertificationError, DomainError, GeometryError
from .trs import solve_trs

SUCCESSFUL = "successful"
MODEL_IMPROVING = "model-improving"
UNSUCCESSFUL = "unsuccessful"
SAFETY = "safety"
STEP_TYPES = (SUCCESSFUL, MODEL_IMPROVING, UNSUCCESSFUL, SAFETY)

STOP_BUDGET = "budget"
STOP_RHO_END = "rho_end"
STOP_FIRST_ORDER = "first_order"


@dataclass(frozen=True)
class TrustRegionConfig:
    Delta0: float = 0.1
    Delta_max: float = 1.0
    gamma_dec: float = 0.5
    gamma_inc: float = 2.0
    eta1: float = 0.1
    eta2: float = 0.7
    eta1_prime: float = 0.04
    eps_crit: float = 1e-8
    rho_end: float = 1e-6
    eval_budget: int = 20
    Lambda_max: float = mdl.LAMBDA_MAX
    accuracy_constant: float = 10.0  # model points are requested at accuracy_constant * Delta^2
    criticality: bool = True

    def __post_init__(self):
        problems = []
        if not 0 < self.gamma_dec < 1 < self.gamma_inc:
            problems.append("need 0 < gamma_dec < 1 < gamma_inc")
        if not 0 < self.eta1 <= self.eta2 < 1:
            problems.append("need 0 < eta1 <= eta2 < 1")
        if not 0 < self.eta1_prime < min(self.eta1, 1 - self.eta2) / 2:
            problems.append("need 0 < eta1_prime < min(eta1, 1 - eta2) / 2")
        if not 0 < self.Delta0 <= self.Delta_max:
            problems.append("need 0 < Delta0 <= Delta_max")
        if self.eval_budget < 0:
            problems.append("eval_budget must be nonnegative")
        if not self.Lambda_max > 1:
            problems.append("Lambda_max must exceed 1")
        if not self.eps_crit > 0 or not self.rho_end > 0 or not self.accuracy_constant > 0:
            problems.append("eps_crit, rho_end and accuracy_constant must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    def model_accuracy(self, Delta: float) -> float:
        return self.accuracy_constant * Delta * Delta


@dataclass
class IterationRecord:
    k: int
    theta: list
    Delta: float
    f_tilde: float
    delta: float
    delta_plus: float
    g_norm: float
    pred: float
    rho_tilde: float
    rho_ref: float
    step: str
    fully_linear: bool
    accuracy_enforced: bool
    Delta_next: float
    lower_iters: int
    cumulative_lower_iters: int
    n_evals: int


HISTORY_COLUMNS = tuple(f.name for f in fields(IterationRecord))


@dataclass
class RunResult:
    theta: np.ndarray
    history: list
    reason: str
    final: object = field(repr=False, default=None)
    n_evals: int = 0
    criticality_calls: int = 0

    def __iter__(self):
        yield self.theta
        yield self.history

    @property
    def f_tilde(self) -> float:
        return float(self.final.f_tilde)


class _Budget(Exception):
    pass


class _RhoEnd(Exception):
    pass


class _Converged(Exception):
    pass


class _Loop:
    """Mutable run state; kept out of ``run`` so the phases read as methods."""

    def __init__(self, oracle, theta0, config, lower, upper, reference, check):
        self.oracle = oracle
        self.cfg = config
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.width = self.upper - self.lower
        self.reference = reference
        self.check = check
        self.dynamic = bool(getattr(oracle, "dynamic", True))
        self.u = self.to_unit(theta0)
        self.Delta = config.Delta0
        self.iset = None
        self.model = None
        self.history = []
        self.criticality_calls = 0
        self._ref_cache = {}
        self.memo = {}

    # coordinates
    def to_unit(self, theta):
        return (np.asarray(theta, dtype=float) - self.lower) / self.width

    def to_theta(self, u):
        return np.clip(self.lower + np.asarray(u, dtype=float) * self.width, self.lower, self.upper)

    def box(self, center=None):
        c = self.iset.center if center is None else center
        return -c, 1.0 - c

    # evaluation helpers
    def evaluate(self, u):
        """Evaluate at ``10 Delta^2``; a point seen before is continued rather than re-evaluated."""
        key = np.asarray(u, dtype=float).tobytes()
        dx = self.cfg.model_accuracy(self.Delta)
        if key in self.memo:
            ev = self.oracle.refine_x(self.memo[key], dx)
        else:
            if self.oracle.n_evals >= self.cfg.eval_budget:
                raise _Budget
            ev = self.oracle.evaluate(self.to_theta(u), dx)
        self.memo[key] = ev
        return ev

    def remember(self, u, ev):
        self.memo[np.asarray(u, dtype=float).tobytes()] = ev

    def point_oracle(self, u):
        ev = self.evaluate(u)
        return ev.scaled, ev.delta_x, ev

    def set_center_eval(self, ev):
        self.iset.update(0, ev.scaled, ev.delta_x, ev)

    @property
    def center_eval(self):
        return self.iset.payload[0]

    def refit(self):
        self.model = mdl.fit(self.iset, self.Delta)
        return self.model

    def ref_f(self, u):
        if self.reference is None:
            return math.nan
        key = np.asarray(u, dtype=float).tobytes()
        if key not in self._ref_cache:
            self._ref_cache[key] = self.reference(self.to_theta(u)).f_tilde
        return self._ref_cache[key]

    # interpolation set management
    def initial_set(self, ev0):
        d = self.u.size
        pts = [self.u.copy()]
        for j in range(d):
            p = self.u.copy()
            p[j] += self.Delta
            if p[j] > 1.0:
                p[j] = self.u[j] - self.Delta
            pts.append(p)
        pts = np.array(pts)
        res = np.zeros((d + 1, ev0.scaled.size))
        res[0] = ev0.scaled
        self.iset = mdl.InterpSet(pts, res, np.zeros(d + 1), [ev0] + [None] * d)
        self.iset.accuracy[0] = ev0.delta_x
        for j in range(1, d + 1):
            r, acc, ev = self.point_oracle(pts[j])
            self.iset.update(j, r, acc, ev)

    def accuracy_limit(self):
        return self.cfg.model_accuracy(self.Delta) if self.dynamic else None

    def fully_linear(self):
        lo, hi = self.box()
        return mdl.is_fully_linear(self.iset, self.Delta, self.cfg.Lambda_max, self.accuracy_limit(), lo, hi)

    def make_fully_linear(self):
        """Restore full linearity in ``B(theta^k, Delta)``; every new point is requested at ``10 Delta^2``."""
        lo, hi = self.box()
        center = self.iset.center.copy()
        # far points first; each is replaced by a point inside the ball, so d passes suffice
        radius = mdl.ball_radius_tol(self.Delta, center)
        for _ in range(self.iset.d):
            far = self.iset.distances()[1:] > radius
            if not far.any():
                break
            t = 1 + int(np.argmax(np.where(far, self.iset.distances()[1:], -1.0)))
            try:
                rep = mdl.lagrange_poisedness(self.iset, center, self.Delta, lo, hi)
                point = rep.maximizers[t]
            except GeometryError:
                point = self._coordinate_point(t - 1)
            r, acc, ev = self.point_oracle(point)
            self.iset.replace(t, point, r, acc, ev)
        try:
            self.iset, _ = mdl.improve_geometry(self.iset, center, self.Delta, self.cfg.Lambda_max,
                                                self.point_oracle, lo, hi)
        except GeometryError:
            self._reset_set()
        if self.dynamic:
            limit = self.cfg.model_accuracy(self.Delta)
            for t in range(self.iset.d + 1):
                ev = self.iset.payload[t]
                if self.iset.accuracy[t] > limit and ev is not None:
                    ev = self.oracle.refine_x(ev, limit)
                    self.remember(self.iset.points[t], ev)
                    self.iset.update(t, ev.scaled, ev.delta_x, ev)
        self.refit()

    def _coordinate_point(self, j):
        p = self.iset.center.copy()
        p[j] += self.Delta
        if p[j] > 1.0:
            p[j] = self.iset.center[j] - self.Delta
        return p

    def _reset_set(self):
        for j in range(self.iset.d):
            p = self._coordinate_point(j)
            r, acc, ev = self.point_oracle(p)
            self.iset.replace(j + 1, p, r, acc, ev)

    def insert_center(self, u_new, ev_new):
        """Add the accepted point, dropping the point farthest from it (lowest index on ties)."""
        dist = np.linalg.norm(self.iset.points - u_new, axis=1)
        t = int(np.argmax(dist))
        trial = self.iset.copy()
        trial.replace(t, u_new, ev_new.scaled, ev_new.delta_x, ev_new)
        trial.make_center(t)
        try:
            mdl.fit(trial)
        except GeometryError:
            a, _ = mdl.lagrange_coefficients(self.iset, u_new)
            t = int(np.argmax(np.abs(a)))
            trial = self.iset.copy()
            trial.replace(t, u_new, ev_new.scaled, ev_new.delta_x, ev_new)
            trial.make_center(t)
        self.iset = trial

    # phases
    def criticality(self):
        if not self.cfg.criticality:
            return
        if np.linalg.norm(self.model.g) > self.cfg.eps_crit:
            return
        self.criticality_calls += 1
        while True:
            if not self.fully_linear():
                self.make_fully_linear()
            gn = float(np.linalg.norm(self.model.g))
            if self.Delta <= gn:
                return
            if gn <= self.cfg.eps_crit and self.Delta <= self.cfg.eps_crit:
                raise _Converged
            self.Delta *= self.cfg.gamma_dec
            if self.Delta < self.cfg.rho_end:
                raise _RhoEnd

    def step(self):
        lo, hi = self.box()
        return solve_trs(self.model.g, self.model.H, self.Delta, (lo, hi))

    def accuracy_phase(self):
        first = True
        while True:
            if not first:
                target = self.cfg.eta1_prime * sol.predicted_decrease
                before = self.center_eval.delta_f
                ev = self.oracle.refine_f(self.center_eval, target)
                if ev.delta_f >= before:
                    # the oracle cannot tighten further; the ratio check reports it
                    return sol
                self.remember(self.iset.center, ev)
                self.set_center_eval(ev)
                self.refit()
            first = False
            self.criticality()
            sol = self.step()
            if sol.predicted_decrease <= 0 or not self.dynamic:
                return sol
            if self.center_eval.delta_f <= self.cfg.eta1_prime * sol.predicted_decrease:
                return sol


def run(oracle, theta0, config: TrustRegionConfig | None = None, lower=None, upper=None, reference=None,
        check: bool = True) -> RunResult:
    """Minimise ``f~`` over the box with the dynamic-accuracy trust-region method.

    ``oracle`` is a :class:`~bilevel_dfo.bilevel.BilevelOracle` (or anything with
    ``evaluate``, ``refine_x``, ``refine_f``, ``n_evals``, ``cumulative_iters``).
    Bounds default to the oracle's parameter map. ``reference`` is an optional
    high-accuracy evaluator used only to log the true ratio ``rho``; its work
    is not counted. Returns a :class:`RunResult` that also unpacks as
    ``(theta_final, history)``.
    """
    cfg = config or TrustRegionConfig()
    if lower is None or upper is None:
        pmap = oracle.tset.pmap
        lower, upper = pmap.lower, pmap.upper
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if theta0.shape != lower.shape or np.any(theta0 < lower) or np.any(theta0 > upper):
        raise DomainError(f"theta0={theta0.tolist()} is outside the box")
    if np.any(upper <= lower):
        raise DomainError("every upper bound must exceed its lower bound")

    S = _Loop(oracle, theta0, cfg, lower, upper, reference, check)
    ev0 = oracle.evaluate(theta0, cfg.model_accuracy(cfg.Delta0))
    S.remember(S.u, ev0)
    reason = STOP_BUDGET
    k = 0
    try:
        if oracle.n_evals >= cfg.eval_budget:
            raise _Budget
        S.initial_set(ev0)
        S.refit()
        while True:
            if oracle.n_evals >= cfg.eval_budget:
                raise _Budget
            if S.Delta < cfg.rho_end:
                raise _RhoEnd
            iters_before = oracle.cumulative_iters
            sol = S.accuracy_phase()
            u_k = S.iset.center.copy()
            ev_k = S.center_eval
            Delta_k = S.Delta
            fl = S.fully_linear()
            pred = sol.predicted_decrease
            g_norm = float(np.linalg.norm(S.model.g))
            delta_plus = math.nan
            rho = rho_ref = math.nan
            enforced = False
            ev_plus = None
            u_plus = np.clip(u_k + sol.s, 0.0, 1.0)
            if pred > 0:
                ev_plus = S.evaluate(u_plus)
                ev_plus = oracle.refine_f(ev_plus, cfg.eta1_prime * pred)
                S.remember(u_plus, ev_plus)
                delta_plus = ev_plus.delta_f
                enforced = max(ev_k.delta_f, delta_plus) <= cfg.eta1_prime * pred * (1 + 1e-12)
                if S.dynamic and check and not enforced:
                    raise CertificationError("accuracy phase failed to certify the ratio test")
                rho = (ev_k.f_tilde - ev_plus.f_tilde) / pred
                if reference is not None:
                    rho_ref = (S.ref_f(u_k) - S.ref_f(u_plus)) / pred

            if pred > 0 and (rho >= cfg.eta2 or (rho >= cfg.eta1 and fl)):
                kind = SUCCESSFUL
            elif pred > 0 and not fl:
                kind = MODEL_IMPROVING
            else:
                kind = UNSUCCESSFUL
            if pred > 0 and rho >= cfg.eta2:
                Delta_next = min(cfg.gamma_inc * Delta_k, cfg.Delta_max)
            elif pred > 0 and not fl:
                Delta_next = Delta_k
            else:
                Delta_next = cfg.gamma_dec * Delta_k

            S.history.append(IterationRecord(
                k, S.to_theta(u_k).tolist(), Delta_k, ev_k.f_tilde, ev_k.delta_f, delta_plus, g_norm, pred,
                rho, rho_ref, kind, bool(fl), bool(enforced), Delta_next,
                oracle.cumulative_iters - iters_before, oracle.cumulative_iters, oracle.n_evals))
            k += 1

            S.Delta = Delta_next
            if kind == SUCCESSFUL:
                S.insert_center(u_plus, ev_plus)
                S.refit()
            elif not fl:
                if S.Delta < cfg.rho_end:
                    raise _RhoEnd
                S.make_fully_linear()
            else:
                S.refit()
    except _Budget:
        reason = STOP_BUDGET
    except _RhoEnd:
        reason = STOP_RHO_END
    except _Converged:
        reason = STOP_FIRST_ORDER
    u_final = S.iset.center if S.iset is not None else S.u
    final = S.center_eval if S.iset is not None else ev0
    return RunResult(S.to_theta(u_final), S.history, reason, final, oracle.n_evals, S.criticality_calls)


def write_history(result: RunResult, path, metadata: dict | None = None):
    """History CSV (one row per iteration, columns ``HISTORY_COLUMNS``) plus ``<path>.json`` metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in result.history:
            row = asdict(rec)
            row["theta"] = ";".join(repr(float(v)) for v in rec.theta)
            w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])
    meta = dict(metadata or {})
    meta.update({"theta_final": [float(v) for v in result.theta], "stop_reason": result.reason,
                 "n_evals": result.n_evals, "columns": list(HISTORY_COLUMNS)})
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path, sidecar


def read_history(path):
    """Rows of a history CSV as dicts with numeric fields converted."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: not a history file (columns {reader.fieldnames})")
        for row in reader:
            rec = {}
            for f in fields(IterationRecord):
                v = row[f.name]
                if f.name == "theta":
                    rec[f.name] = [float(t) for t in v.split(";")] if v else []
                elif f.name == "step":
                    rec[f.name] = v
                elif f.name in ("fully_linear", "accuracy_enforced"):
                    rec[f.name] = v == "True"
                elif f.name in ("k", "lower_iters", "cumulative_lower_iters", "n_evals"):
                    rec[f.name] = int(v)
                else:
                    rec[f.name] = float(v)
            out.append(IterationRecord(**rec))
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
