"""Experiment builders and the six-variant comparison harness.

A variant is an accuracy mode crossed with a lower-level solver:
``dynamic`` (certified, accuracy set by the trust-region state), ``low`` and
``high`` (a fixed number of iterations per evaluation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bilevel, datagen, driver, problems, solvers
from .bilevel import BilevelOracle, ReferenceOracle, Regularizer, TrainingSet
from .problems import DFT, ParamMap, ProblemInstance, idft

DENOISE1 = "denoise-1"
DENOISE3 = "denoise-3"
MRI = "mri"
TOY = "toy"
EXPERIMENTS = (DENOISE1, DENOISE3, MRI, TOY)

MRI_THRESHOLD = 0.001
MRI_BOUNDS = (0.001, 0.99)

# fixed-iteration baselines: (low, high) iterations per evaluation
BASELINE_K = {
    "denoise": {"gd": (1000, 10000), "fista": (200, 2000)},
    "mri": {"gd": (1000, 10000), "fista": (200, 1000)},
}

DEFAULTS = {
    DENOISE1: dict(N=256, sigma=0.1, n=10, budget=20, theta0=[0.0]),
    DENOISE3: dict(N=256, sigma=0.1, n=20, budget=100, theta0=[0.0, -1.0, -1.0], beta=1e-6),
    MRI: dict(N=32, sigma=0.05, n=10, budget=3000, theta0=None, beta=0.1),
    TOY: dict(N=16, sigma=0.1, n=3, budget=60, theta0=[0.0]),
}


@dataclass(frozen=True)
class Variant:
    mode: str  # dynamic | low | high
    solver: str  # gd | fista

    @property
    def name(self) -> str:
        return f"{self.mode}-{self.solver}"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        mode, _, solver = name.partition("-")
        if mode not in ("dynamic", "low", "high") or solver not in solvers.SOLVERS:
            raise ValueError(f"unknown variant {name!r}; expected e.g. dynamic-fista, high-gd")
        return cls(mode, solver)


ALL_VARIANTS = tuple(Variant(m, s) for s in ("gd", "fista") for m in ("dynamic", "low", "high"))


def baseline_iterations(kind: str, variant: Variant) -> int | None:
    if variant.mode == "dynamic":
        return None
    low, high = BASELINE_K["mri" if kind == "mri" else "denoise"][variant.solver]
    return low if variant.mode == "low" else high


def toy_training_set(n=3, N=16, scale=0.7, noise=0.1, seed=0, lower=-5.0, upper=5.0) -> TrainingSet:
    """Quadratic toy with ``x_hat_i = theta y_i`` and targets ``x_i = scale y_i + noise``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    y = rng.standard_normal((n, N))
    x = scale * y + noise * rng.standard_normal((n, N))
    return TrainingSet(x, y, ParamMap(problems.SCALE_DATA, [lower], [upper]))


def toy_optimum(tset: TrainingSet) -> float:
    return float(np.sum(tset.x_true * tset.y) / np.sum(tset.y * tset.y))


def build(kind: str, dataset: datagen.Dataset | None = None, *, N=None, sigma=None, n=None, seed=0, beta=None,
          nu=1e-3, xi=1e-3, mri_alpha=0.01, mri_nu=0.01, mri_xi=1e-4) -> TrainingSet:
    """Training set for one of the experiments, from a dataset or generated from ``seed``."""
    if kind not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {kind!r}")
    d = DEFAULTS[kind]
    if kind == TOY:
        return toy_training_set(n=n or d["n"], N=N or d["N"], seed=seed)
    data_kind = datagen.MRI if kind == MRI else datagen.DENOISE
    if dataset is None:
        spec = datagen.SignalSpec(N or d["N"], d["sigma"] if sigma is None else sigma, n or d["n"], seed)
        dataset = datagen.make_dataset(spec, data_kind)
    elif dataset.kind != data_kind:
        raise ValueError(f"{kind} needs a {data_kind} dataset, got {dataset.kind}")
    beta = d.get("beta") if beta is None else beta
    if kind == DENOISE1:
        pmap = ParamMap(problems.LOG_ALPHA, [-7.0], [7.0], {"nu": nu, "xi": xi})
        reg = None
    elif kind == DENOISE3:
        pmap = ParamMap(problems.LOG_ALPHA_NU_XI, [-7.0, -7.0, -7.0], [7.0, 0.0, 0.0])
        reg = Regularizer(bilevel.CONDITION, beta)
    else:
        N_pix = dataset.spec.N
        pmap = ParamMap(problems.MRI_WEIGHTS, np.full(N_pix, MRI_BOUNDS[0]), np.full(N_pix, MRI_BOUNDS[1]),
                        {"alpha": mri_alpha, "nu": mri_nu, "xi": mri_xi})
        reg = Regularizer(bilevel.L1, beta)
    return TrainingSet(dataset.x, dataset.y, pmap, reg)


def default_theta0(kind: str, tset: TrainingSet):
    t0 = DEFAULTS[kind]["theta0"]
    if t0 is None:
        return np.full(tset.pmap.dim, 0.5)
    return np.asarray(t0, dtype=float)


def make_oracle(tset: TrainingSet, variant: Variant, threads: int = 1,
                max_iter: int = solvers.DEFAULT_MAX_ITER) -> BilevelOracle:
    K = baseline_iterations(tset.kind, variant)
    mode = bilevel.DYNAMIC if K is None else bilevel.FIXED
    return BilevelOracle(tset, variant.solver, mode, K, max_iter=max_iter, threads=threads)


@dataclass
class VariantResult:
    variant: Variant
    run: driver.RunResult
    eval_log: list = field(repr=False, default_factory=list)
    total_lower_iters: int = 0

    @property
    def name(self):
        return self.variant.name

    @property
    def theta(self):
        return self.run.theta

    def trace(self):
        """``(cumulative_lower_iters, best_f_tilde, f_tilde, delta)`` per iterate, plus the final point."""
        rows, best = [], math.inf
        for h in self.run.history:
            best = min(best, h.f_tilde)
            rows.append((h.cumulative_lower_iters, best, h.f_tilde, h.delta))
        if self.run.final is not None:
            best = min(best, self.run.final.f_tilde)
            rows.append((self.total_lower_iters, best, self.run.final.f_tilde, self.run.final.delta_f))
        return rows

    def work_to_reach(self, rel: float = 0.01) -> int:
        """Cumulative lower-level iterations when the best iterate value first gets within ``rel`` of the final one."""
        tr = self.trace()
        final = tr[-1][1]
        for work, best, _, _ in tr:
            if best <= final + rel * abs(final):
                return int(work)
        return int(tr[-1][0])


def run_variant(tset: TrainingSet, variant: Variant, theta0, config: driver.TrustRegionConfig, reference=None,
                threads: int = 1, check: bool = True) -> VariantResult:
    oracle = make_oracle(tset, variant, threads)
    res = driver.run(oracle, theta0, config, reference=reference, check=check)
    return VariantResult(variant, res, list(oracle.log), oracle.cumulative_iters)


def compare_variants(tset: TrainingSet, theta0, config: driver.TrustRegionConfig, variants=ALL_VARIANTS,
                     threads: int = 1) -> dict:
    """Run every variant on the same training set and start; results keyed by variant name."""
    out = {}
    for v in variants:
        v = Variant.parse(v) if isinstance(v, str) else v
        out[v.name] = run_variant(tset, v, theta0, config, threads=threads)
    return out


def aligned_table(results: dict):
    """Long-format rows ``(variant, cumulative_lower_iters, best_f_tilde, f_tilde, delta)`` sorted by work."""
    rows = []
    for name, r in results.items():
        rows.extend((name, *row) for row in r.trace())
    rows.sort(key=lambda row: (row[1], row[0]))
    return rows


def mapped_parameters(pmap: ParamMap, theta) -> dict:
    st = pmap.settings(theta)
    out = {"theta": [float(t) for t in np.atleast_1d(theta)]}
    for key in ("alpha", "nu", "xi"):
        if st[key] is not None:
            out[key] = float(st[key])
    if st["weights"] is not None:
        out["weights"] = st["weights"].tolist()
    return out


def thresholded_weights(theta, threshold: float = MRI_THRESHOLD):
    """Sampling weights ``theta/(1 - theta)`` on modes with ``theta > threshold``, zero elsewhere."""
    theta = np.asarray(theta, dtype=float)
    active = theta > threshold
    return np.where(active, theta / (1.0 - np.where(active, theta, 0.0)), 0.0), active


def reconstruct(tset: TrainingSet, theta, iterations: int = 2000, threshold: float | None = None):
    """Final reconstructions with a fixed FISTA budget; MRI patterns may be thresholded first."""
    if tset.pmap.variant == problems.MRI_WEIGHTS and threshold is not None:
        weights, _ = thresholded_weights(theta, threshold)
        st = tset.pmap.settings(theta)
        inst = ProblemInstance(DFT, weights, tset.y, st["alpha"], st["nu"], st["xi"], tset.n_pixels)
    else:
        inst = tset.instance(theta)
    res = solvers.fista_solve(inst, tset.initial_guess(), solvers.FixedIterations(iterations))
    return res.x_tilde


def zero_filled(tset: TrainingSet, active):
    """Adjoint baseline ``Re(F^H (mask * y))`` for a binary sampling mask."""
    return idft(np.asarray(active, dtype=float) * tset.y).real


def mse(x, x_true):
    return np.mean((np.asarray(x) - np.asarray(x_true)) ** 2, axis=-1)


def sweep_sigma(sigmas, *, N=None, n=None, seed=0, theta0=(0.0,), config=None, solver="fista", threads=1):
    """Denoise-1 per noise level; rows ``(sigma, alpha_final, sigma^2/alpha_final, f_final)``."""
    cfg = config or driver.TrustRegionConfig(eval_budget=DEFAULTS[DENOISE1]["budget"])
    rows = []
    for sigma in sigmas:
        tset = build(DENOISE1, N=N, sigma=sigma, n=n, seed=seed)
        r = run_variant(tset, Variant("dynamic", solver), theta0, cfg, threads=threads)
        alpha = 10.0 ** float(r.theta[0])
        rows.append((float(sigma), alpha, float(sigma) ** 2 / alpha, r.run.f_tilde))
    return rows


def reference_oracle(tset: TrainingSet, delta_x: float = 1e-10) -> ReferenceOracle:
    return ReferenceOracle(tset, delta_x)
