"""Command-line harness: ``gen``, ``run``, ``sweep-sigma`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 numerical or certification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen, driver, experiments as ex
from .bilevel import BilevelOracle
from .config import DEFAULT_OUT, OUT_ENV, ConfigError, ExperimentConfig, load
from .exceptions import CertificationError, DomainError, NumericalError

log = logging.getLogger("bilevel_dfo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# gen

def cmd_gen(args) -> int:
    spec = datagen.SignalSpec(args.N, args.sigma, args.n, args.seed)
    ds = datagen.make_dataset(spec, args.kind)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, DEFAULT_OUT)) / f"{args.kind}.csv"
    csv_path, sidecar = datagen.write_dataset(ds, out)
    print(f"wrote {csv_path} and {sidecar}")
    return EXIT_OK


# run

def _training_set(cfg: ExperimentConfig):
    dataset = datagen.read_dataset(cfg.dataset) if cfg.dataset else None
    tset = ex.build(cfg.experiment, dataset, N=cfg.N, sigma=cfg.sigma, n=cfg.n, seed=cfg.seed, beta=cfg.beta)
    return tset, dataset


def _theta0(cfg, tset):
    if cfg.theta0 is None:
        return ex.default_theta0(cfg.experiment, tset)
    t0 = np.asarray(cfg.theta0, dtype=float)
    if t0.size == 1 and tset.pmap.dim > 1:
        t0 = np.full(tset.pmap.dim, t0[0])
    if t0.size != tset.pmap.dim:
        raise ConfigError(f"theta0 needs {tset.pmap.dim} entries, got {t0.size}")
    if not tset.pmap.contains(t0):
        raise ConfigError("theta0 lies outside the parameter box")
    return t0


def _save_variant(root: Path, cfg, tset, result: ex.VariantResult, metadata):
    vdir = root / result.name
    vdir.mkdir(parents=True, exist_ok=True)
    driver.write_history(result.run, vdir / "history.csv", {**metadata, "variant": result.name})
    _write_csv(vdir / "evals.csv", BilevelOracle.log_header,
               ((e, ph, ";".join(repr(float(t)) for t in th), f, df, it, cum)
                for e, ph, th, f, df, it, cum in result.eval_log))
    params = ex.mapped_parameters(tset.pmap, result.theta)
    params.update({"f_tilde": result.run.f_tilde, "stop_reason": result.run.reason,
                   "n_evals": result.run.n_evals, "total_lower_iters": result.total_lower_iters,
                   "work_to_1pct": result.work_to_reach(0.01)})
    rows = []
    if cfg.recon_iters > 0:
        mri = tset.kind == "mri"
        recon = ex.reconstruct(tset, result.theta, cfg.recon_iters, ex.MRI_THRESHOLD if mri else None)
        for i in range(tset.n):
            rows.append((i, "x_true", *tset.x_true[i].tolist()))
            rows.append((i, "recon", *recon[i].tolist()))
        params["recon_mse"] = ex.mse(recon, tset.x_true).tolist()
        if mri:
            weights, active = ex.thresholded_weights(result.theta)
            zf = ex.zero_filled(tset, active)
            for i in range(tset.n):
                rows.append((i, "zero_filled", *zf[i].tolist()))
            params["zero_filled_mse"] = ex.mse(zf, tset.x_true).tolist()
            params["active_modes"] = int(active.sum())
            _write_csv(vdir / "pattern.csv", ("mode", "theta", "weight", "active"),
                       ((j, float(result.theta[j]), float(weights[j]), int(active[j]))
                        for j in range(tset.n_pixels)))
        _write_csv(vdir / "reconstructions.csv", ("id", "kind", *[f"v{j}" for j in range(tset.n_pixels)]),
                   ([r[0], r[1], *map(repr, r[2:])] for r in rows))
    _write_json(vdir / "params.json", params)
    return vdir


def cmd_run(args) -> int:
    cfg = load(args.config, _overrides(args))
    tset, dataset = _training_set(cfg)
    theta0 = _theta0(cfg, tset)
    tr = cfg.tr_config(ex.DEFAULTS[cfg.experiment]["budget"])
    root = cfg.output_root()
    root.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_json(), "trust_region": asdict(tr), "theta0": theta0.tolist(),
            "dataset_sha256": datagen.dataset_hash(dataset) if dataset is not None else _hash_tset(tset)}
    _write_json(root / "config.json", cfg.to_json())
    reference = ex.reference_oracle(tset) if cfg.reference else None
    for name in cfg.variants:
        v = ex.Variant.parse(name)
        log.info("running %s", v.name)
        result = ex.run_variant(tset, v, theta0, tr, reference=reference, threads=cfg.threads)
        vdir = _save_variant(root, cfg, tset, result, meta)
        print(f"{v.name}: theta={np.round(result.theta, 6).tolist()} f~={result.run.f_tilde:.6g} "
              f"({result.run.reason}, {result.run.n_evals} evals, {result.total_lower_iters} lower iters) -> {vdir}")
    return EXIT_OK


def _hash_tset(tset):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(tset.x_true).tobytes())
    h.update(np.ascontiguousarray(tset.y).tobytes())
    return h.hexdigest()


def _overrides(args):
    tr = {}
    if getattr(args, "no_criticality", False):
        tr["criticality"] = False
    return {
        "experiment": getattr(args, "experiment", None), "dataset": getattr(args, "dataset", None),
        "N": args.N, "n": args.n, "sigma": getattr(args, "sigma", None), "seed": args.seed,
        "variants": getattr(args, "variants", None), "beta": getattr(args, "beta", None),
        "theta0": getattr(args, "theta0", None), "budget": args.budget, "trust_region": tr or None,
        "recon_iters": getattr(args, "recon_iters", None), "reference": True if getattr(args, "reference", False) else None,
        "threads": args.threads, "out": args.out,
    }


# sweep-sigma

def cmd_sweep_sigma(args) -> int:
    cfg = load(args.config, {**_overrides(args), "experiment": ex.DENOISE1})
    tr = cfg.tr_config(ex.DEFAULTS[ex.DENOISE1]["budget"])
    variant = ex.Variant.parse(cfg.variants[0])
    theta0 = cfg.theta0 or [0.0]
    rows = ex.sweep_sigma(args.sigmas, N=cfg.N, n=cfg.n, seed=cfg.seed, theta0=theta0, config=tr,
                          solver=variant.solver, threads=cfg.threads)
    root = cfg.output_root()
    path = _write_csv(root / "sweep_sigma.csv", ("sigma", "alpha_final", "sigma2_over_alpha", "f_final"), rows)
    for r in rows:
        print(f"sigma={r[0]:g} alpha={r[1]:.6g} sigma^2/alpha={r[2]:.6g}")
    if args.figures:
        from . import plotting

        plotting.sweep_figure(rows, root / "sweep_sigma.png")
    print(f"wrote {path}")
    return EXIT_OK


# report

def _find_runs(dirs):
    runs = []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise ConfigError(f"{d} is not a directory")
        runs.extend(sorted(p.parent for p in d.rglob("history.csv")))
    if not runs:
        raise ConfigError("no runs found")
    return runs


def _run_label(path: Path, runs):
    parents = {p.parent for p in runs}
    return path.name if len(parents) == 1 else f"{path.parent.name}/{path.name}"


def cmd_report(args) -> int:
    runs = _find_runs(args.dirs)
    series, finals = {}, []
    for r in runs:
        try:
            hist = driver.read_history(r / "history.csv")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        meta = json.loads((r / "history.csv.json").read_text(encoding="utf-8"))
        params = json.loads((r / "params.json").read_text(encoding="utf-8")) if (r / "params.json").exists() else {}
        label = _run_label(r, runs)
        work, best, b = [], [], np.inf
        for h in hist:
            b = min(b, h.f_tilde)
            work.append(h.cumulative_lower_iters)
            best.append(b)
        if "f_tilde" in params and "total_lower_iters" in params:
            b = min(b, params["f_tilde"])
            work.append(params["total_lower_iters"])
            best.append(b)
        series[label] = (work, best)
        finals.append((label, ";".join(repr(float(t)) for t in meta["theta_final"]), params.get("alpha", ""),
                       params.get("nu", ""), params.get("xi", ""), best[-1] if best else "",
                       work[-1] if work else 0, meta.get("stop_reason", ""), params.get("work_to_1pct", "")))
    grid = sorted({w for work, _ in series.values() for w in work})
    names = list(series)
    table = []
    for w in grid:
        row = [w]
        for nm in names:
            work, best = series[nm]
            idx = np.searchsorted(work, w, side="right") - 1
            row.append(best[idx] if idx >= 0 else "")
        table.append(row)
    out = Path(args.out) if args.out else Path(args.dirs[0])
    p1 = _write_csv(out / "best_vs_work.csv", ("cumulative_lower_iters", *names), table)
    p2 = _write_csv(out / "finals.csv", ("run", "theta", "alpha", "nu", "xi", "best_f_tilde",
                                         "total_lower_iters", "stop_reason", "work_to_1pct"), finals)
    print(f"wrote {p1} and {p2}")
    if args.figures:
        from . import plotting

        fig = plotting.best_value_figure(series, out / "best_vs_work.png")
        print(f"wrote {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilevel-dfo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (CSV + JSON sidecar)")
    g.add_argument("--kind", choices=[datagen.DENOISE, datagen.MRI], default=datagen.DENOISE)
    g.add_argument("--N", type=int, default=256)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"CSV path (default: ${OUT_ENV}/<kind>.csv)")
    g.set_defaults(func=cmd_gen)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config; flags override its values")
        sp.add_argument("--N", type=int)
        sp.add_argument("--n", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--budget", type=int, help="upper-level evaluation budget")
        sp.add_argument("--variants", nargs="+", help="e.g. dynamic-fista high-gd low-fista")
        sp.add_argument("--theta0", type=float, nargs="+")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--no-criticality", action="store_true", help="skip the criticality phase")
        sp.add_argument("--out", help="output directory (default $BILEVEL_DFO_OUT or ./runs)")

    r = sub.add_parser("run", help="run one experiment for one or more variants")
    r.add_argument("--experiment", choices=ex.EXPERIMENTS)
    r.add_argument("--dataset", help="dataset CSV written by gen")
    r.add_argument("--sigma", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--recon-iters", type=int, dest="recon_iters")
    r.add_argument("--reference", action="store_true", help="log the true ratio with a high-accuracy shadow")
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-sigma", help="learned alpha of denoise-1 across noise levels")
    s.add_argument("--sigmas", type=float, nargs="+", required=True)
    s.add_argument("--figures", action="store_true", help="also render a PNG")
    common(s)
    s.set_defaults(func=cmd_sweep_sigma)

    rep = sub.add_parser("report", help="join run histories on cumulative lower-level work")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--out")
    rep.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, CertificationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
