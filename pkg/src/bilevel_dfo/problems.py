"""Smoothed, strongly convex lower-level objectives.

Every instance has the form

    Phi(x) = 1/2 sum_j s_j |[A x - y]_j|^2 + alpha * sum_j sqrt((D x)_j^2 + nu^2) + xi/2 ||x||^2

with ``A`` either the identity (denoising) or the unitary DFT (MRI), ``D`` the
1D forward-difference stencil with ``N - 1`` rows (no wrap-around) and ``x``
real. The data ``y`` may carry leading batch dimensions, in which case each
row is an independent objective sharing the same operator and weights; all
evaluation routines act row-wise along the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import DomainError, NumericalError

IDENTITY = "identity"
DFT = "dft"

LOG_ALPHA = "log_alpha"
LOG_ALPHA_NU_XI = "log_alpha_nu_xi"
MRI_WEIGHTS = "mri_weights"
SCALE_DATA = "scale_data"
VARIANTS = (LOG_ALPHA, LOG_ALPHA_NU_XI, MRI_WEIGHTS, SCALE_DATA)

POWER_ITERATION_TOL = 1e-10


@lru_cache(maxsize=None)
def stencil_norm_sq(n_pixels: int, tol: float = POWER_ITERATION_TOL, max_squarings: int = 64) -> float:
    """Largest eigenvalue of ``D^T D`` for the forward-difference stencil.

    Power method applied to ``(D^T D)^(2^k)`` by repeated squaring: the gap
    between the two leading eigenvalues shrinks like ``1/N^2``, which stalls a
    plain vector power iteration long before ``tol`` is reached.
    """
    if n_pixels < 2:
        return 0.0
    eye = np.eye(n_pixels)
    normal = stencil_adjoint(np.diff(eye, axis=-1))
    power = normal.copy()
    v = np.ones(n_pixels) / np.sqrt(n_pixels)
    lam = 0.0
    for _ in range(max_squarings):
        u = power @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # start vector orthogonal to the dominant subspace
            v = np.random.default_rng(0).standard_normal(n_pixels)
            v /= np.linalg.norm(v)
            continue
        u /= nu
        lam_new = float(u @ (normal @ u))
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
        power = power @ power
        power /= np.max(np.abs(power))
    return lam


def stencil_adjoint(w):
    """Apply ``D^T`` to stencil values ``w`` (last axis of length ``N - 1``)."""
    shape = w.shape[:-1] + (w.shape[-1] + 1,)
    out = np.zeros(shape)
    out[..., 1:] += w
    out[..., :-1] -= w
    return out


def dft(x):
    return np.fft.fft(x, axis=-1, norm="ortho")


def idft(y):
    return np.fft.ifft(y, axis=-1, norm="ortho")


@dataclass(frozen=True)
class ConvexityBounds:
    mu: float
    lipschitz: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.lipschitz)):
            raise DomainError("convexity constants must be finite")
        if self.mu <= 0:
            raise DomainError(f"strong convexity constant must be positive, got mu={self.mu}")
        if self.lipschitz < self.mu:
            raise DomainError(f"need mu <= L, got mu={self.mu}, L={self.lipschitz}")

    @property
    def condition(self) -> float:
        return self.lipschitz / self.mu


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """One lower-level objective (or a batch of them sharing operator and weights)."""

    forward_op: str
    sample_weights: np.ndarray
    data: np.ndarray
    alpha: float
    nu: float
    xi: float
    n_pixels: int
    _bounds: ConvexityBounds = field(init=False, repr=False, compare=False)
    _uniform: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.forward_op not in (IDENTITY, DFT):
            raise DomainError(f"unknown forward operator {self.forward_op!r}")
        s = np.asarray(self.sample_weights, dtype=float)
        if s.shape != (self.n_pixels,):
            raise DomainError("sample weights must have length n_pixels")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise DomainError("sample weights must be finite and nonnegative")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise DomainError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise DomainError(f"nu must be finite and > 0, got {self.nu}")
        if not (np.isfinite(self.xi) and self.xi >= 0):
            raise DomainError(f"xi must be finite and >= 0, got {self.xi}")
        data = np.asarray(self.data)
        if data.shape[-1] != self.n_pixels:
            raise DomainError("data length does not match n_pixels")
        s.setflags(write=False)
        object.__setattr__(self, "sample_weights", s)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_uniform", self.forward_op == IDENTITY and bool(np.all(s == 1.0)))
        object.__setattr__(self, "_bounds", convexity_constants(self))

    @property
    def bounds(self) -> ConvexityBounds:
        return self._bounds

    @property
    def denoising(self) -> bool:
        return self.forward_op == IDENTITY

    def objective(self, x):
        return eval_objective(self, x)

    def gradient(self, x):
        # unchecked: this is the solver hot path, eval_gradient validates
        return _gradient(self, np.asarray(x, dtype=float))

    def with_data(self, data) -> "ProblemInstance":
        return ProblemInstance(self.forward_op, self.sample_weights, data, self.alpha, self.nu,
                               self.xi, self.n_pixels)


@dataclass(frozen=True, eq=False)
class ParamMap:
    """Map from upper-level parameters ``theta`` to lower-level settings.

    ``fixed`` holds the settings that are not learned (any of ``alpha``,
    ``nu``, ``xi``). ``lower``/``upper`` is the box on ``theta``.
    """

    variant: str
    lower: np.ndarray
    upper: np.ndarray
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown parameter map {self.variant!r}")
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise DomainError("box needs lower < upper componentwise")
        expected = {LOG_ALPHA: 1, LOG_ALPHA_NU_XI: 3, SCALE_DATA: 1}.get(self.variant)
        if expected is not None and lo.size != expected:
            raise DomainError(f"{self.variant} expects {expected} parameter(s), box has {lo.size}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "fixed", dict(self.fixed))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, theta, tol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        span = self.upper - self.lower
        return bool(np.all(theta >= self.lower - tol * span) and np.all(theta <= self.upper + tol * span))

    def settings(self, theta) -> dict:
        """Return ``alpha``, ``nu``, ``xi`` and the sampling weights for ``theta``."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != self.lower.shape:
            raise DomainError(f"theta has shape {theta.shape}, expected {self.lower.shape}")
        if not np.all(np.isfinite(theta)) or not self.contains(theta):
            raise DomainError(f"theta={theta} outside box [{self.lower}, {self.upper}]")
        out = {"alpha": self.fixed.get("alpha"), "nu": self.fixed.get("nu"), "xi": self.fixed.get("xi"),
               "weights": None, "scale": 1.0}
        if self.variant == LOG_ALPHA:
            out["alpha"] = 10.0 ** theta[0]
        elif self.variant == LOG_ALPHA_NU_XI:
            out["alpha"], out["nu"], out["xi"] = (10.0 ** t for t in theta)
        elif self.variant == MRI_WEIGHTS:
            if np.any(theta >= 1.0) or np.any(theta < 0.0):
                raise DomainError("sampling parameters must lie in [0, 1)")
            out["weights"] = theta / (1.0 - theta)
        else:
            out["scale"] = float(theta[0])
        return out


def mri_weights(theta):
    theta = np.asarray(theta, dtype=float)
    return theta / (1.0 - theta)


def instantiate(pmap: ParamMap, theta, data) -> ProblemInstance:
    """Build the lower-level instance for ``theta`` and measurements ``data``.

    ``scale_data`` is the quadratic toy ``1/2 ||x - theta y||^2``: identity
    operator, no regulariser, data scaled by ``theta``.
    """
    st = pmap.settings(theta)
    data = np.asarray(data)
    n_pixels = data.shape[-1]
    if pmap.variant == MRI_WEIGHTS:
        if pmap.dim != n_pixels:
            raise DomainError("one sampling parameter per Fourier mode is required")
        return ProblemInstance(DFT, st["weights"], data, st["alpha"], st["nu"], st["xi"], n_pixels)
    if np.iscomplexobj(data):
        raise DomainError("denoising data must be real")
    if pmap.variant == SCALE_DATA:
        return ProblemInstance(IDENTITY, np.ones(n_pixels), st["scale"] * data, st["alpha"] or 0.0,
                               st["nu"] or 1.0, st["xi"] or 0.0, n_pixels)
    return ProblemInstance(IDENTITY, np.ones(n_pixels), data, st["alpha"], st["nu"], st["xi"], n_pixels)


def _check_x(inst, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != inst.n_pixels:
        raise DomainError(f"x has length {x.shape[-1]}, expected {inst.n_pixels}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite entries in x")
    return x


def eval_objective(inst: ProblemInstance, x):
    x = _check_x(inst, x)
    if inst.forward_op == IDENTITY:
        resid = np.abs(x - inst.data) ** 2
    else:
        resid = np.abs(dft(x) - inst.data) ** 2
    data_term = 0.5 * np.sum(inst.sample_weights * resid, axis=-1)
    d = np.diff(x, axis=-1)
    tv = np.sum(np.sqrt(d * d + inst.nu ** 2), axis=-1)
    return data_term + inst.alpha * tv + 0.5 * inst.xi * np.sum(x * x, axis=-1)


def eval_gradient(inst: ProblemInstance, x):
    x = _check_x(inst, x)
    return _gradient(inst, x)


def _gradient(inst, x):
    # unchecked fast path used inside the solver loops
    if inst.forward_op == IDENTITY:
        g = x - inst.data
        if not inst._uniform:
            g = inst.sample_weights * g
    else:
        g = idft(inst.sample_weights * (dft(x) - inst.data)).real
    if inst.alpha != 0.0:
        d = np.diff(x, axis=-1)
        w = d / np.sqrt(d * d + inst.nu ** 2)
        w *= inst.alpha
        g[..., 1:] += w
        g[..., :-1] -= w
    if inst.xi != 0.0:
        g += inst.xi * x
    return g


def convexity_constants(inst: ProblemInstance) -> ConvexityBounds:
    """Strong convexity and gradient Lipschitz constants.

    With a unitary operator ``A^* S A`` has spectrum ``[min s, max s]``, so
    ``mu = min s + xi`` and ``L = max s + alpha ||D||^2 / nu + xi``.
    """
    s = np.asarray(inst.sample_weights, dtype=float)
    mu = float(np.min(s)) + inst.xi
    if mu <= 0:
        raise DomainError(f"instance is not strongly convex (mu={mu})")
    lip = float(np.max(s)) + inst.alpha * stencil_norm_sq(inst.n_pixels) / inst.nu + inst.xi
    return ConvexityBounds(mu, max(lip, mu))


def condition_penalty(pmap: ParamMap, theta, beta: float, n_pixels: int) -> float:
    """``beta * (L / mu)^2`` for the denoising constants at ``theta``."""
    if pmap.variant != LOG_ALPHA_NU_XI:
        raise DomainError("condition penalty is defined for the 3-parameter denoising map")
    st = pmap.settings(theta)
    mu = 1.0 + st["xi"]
    lip = 1.0 + st["alpha"] * stencil_norm_sq(n_pixels) / st["nu"] + st["xi"]
    return beta * (lip / mu) ** 2
