"""Seeded synthetic 1D training data.

Each image ``i`` gets its own PCG64 stream spawned from the dataset seed via
``numpy.random.SeedSequence(seed).spawn(n)[i]``; within a stream the signal
centre and radius are drawn first, then the noise. Datasets are therefore a
pure function of ``(spec, seed)`` and bit-identical across platforms.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .problems import dft

DENOISE = "denoise"
MRI = "mri"
RNG_NAME = "numpy.PCG64/SeedSequence.spawn"


@dataclass(frozen=True)
class SignalSpec:
    N: int
    sigma: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.N < 8:
            raise ValueError(f"N must be at least 8, got {self.N}")
        if self.n < 1:
            raise ValueError(f"need at least one image, got n={self.n}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass
class Dataset:
    kind: str
    spec: SignalSpec
    x: np.ndarray
    y: np.ndarray
    centers: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.kind == other.kind and self.spec == other.spec
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))


def image_streams(seed: int, n: int):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_signal(spec: SignalSpec, rng: np.random.Generator, return_params: bool = False):
    """Indicator of ``|j - C| < R`` on ``j = 1..N`` with continuous uniform ``C``, ``R``."""
    N = spec.N
    center = rng.uniform(N / 4, 3 * N / 4)
    radius = rng.uniform(N / 8, N / 4)
    j = np.arange(1, N + 1)
    x = (np.abs(j - center) < radius).astype(float)
    if return_params:
        return x, center, radius
    return x


def gen_denoise_pair(x, sigma: float, rng: np.random.Generator):
    x = np.asarray(x, dtype=float)
    return x + sigma * rng.standard_normal(x.shape)


def gen_mri_pair(x, sigma: float, rng: np.random.Generator):
    x = np.asarray(x, dtype=float)
    omega = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return dft(x) + (sigma / np.sqrt(2.0)) * omega


def make_dataset(spec: SignalSpec, kind: str = DENOISE) -> Dataset:
    if kind not in (DENOISE, MRI):
        raise ValueError(f"unknown dataset kind {kind!r}")
    xs, ys, cs, rs = [], [], [], []
    for rng in image_streams(spec.seed, spec.n):
        x, c, r = gen_signal(spec, rng, return_params=True)
        y = gen_denoise_pair(x, spec.sigma, rng) if kind == DENOISE else gen_mri_pair(x, spec.sigma, rng)
        xs.append(x)
        ys.append(y)
        cs.append(c)
        rs.append(r)
    return Dataset(kind, spec, np.array(xs), np.array(ys), np.array(cs), np.array(rs))


def _rows(ds: Dataset):
    for i in range(len(ds)):
        yield [i, "x", *map(repr, ds.x[i].tolist())]
        if ds.kind == DENOISE:
            yield [i, "y", *map(repr, ds.y[i].real.tolist())]
        else:
            yield [i, "y_re", *map(repr, ds.y[i].real.tolist())]
            yield [i, "y_im", *map(repr, ds.y[i].imag.tolist())]


def write_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV, one row per image and field) and ``<path>.json`` (spec sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "kind", *[f"v{j}" for j in range(ds.spec.N)]])
        w.writerows(_rows(ds))
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    meta = {"kind": ds.kind, "spec": asdict(ds.spec), "rng": RNG_NAME, "sha256": digest,
            "centers": ds.centers.tolist(), "radii": ds.radii.tolist()}
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, sidecar


def read_dataset(path) -> Dataset:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    spec = SignalSpec(**meta["spec"])
    fields = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "kind"] or len(header) != spec.N + 2:
            raise ValueError(f"{path}: unexpected dataset header")
        for row in reader:
            fields.setdefault(row[1], {})[int(row[0])] = np.array([float(v) for v in row[2:]])
    order = sorted(fields["x"])
    x = np.array([fields["x"][i] for i in order])
    if meta["kind"] == DENOISE:
        y = np.array([fields["y"][i] for i in order])
    else:
        y = np.array([fields["y_re"][i] + 1j * fields["y_im"][i] for i in order])
    return Dataset(meta["kind"], spec, x, y, np.array(meta.get("centers", [])), np.array(meta.get("radii", [])))


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.kind.encode())
    h.update(np.ascontiguousarray(ds.x).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    return h.hexdigest()
