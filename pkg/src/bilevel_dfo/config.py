"""Experiment configuration: JSON schema, defaults and validation."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema

from .driver import TrustRegionConfig
from .experiments import EXPERIMENTS, Variant

OUT_ENV = "BILEVEL_DFO_OUT"
DEFAULT_OUT = "runs"

_TR_FIELDS = {f.name: ("integer" if f.name == "eval_budget" else "boolean" if f.name == "criticality" else "number")
              for f in fields(TrustRegionConfig)}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bilevel-dfo experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "dataset": {"type": "string"},
        "N": {"type": "integer", "minimum": 8},
        "n": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "variants": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "beta": {"type": "number", "minimum": 0},
        "theta0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "budget": {"type": "integer", "minimum": 0},
        "trust_region": {"type": "object", "additionalProperties": False,
                         "properties": {k: {"type": t} for k, t in _TR_FIELDS.items()}},
        "recon_iters": {"type": "integer", "minimum": 0},
        "reference": {"type": "boolean"},
        "threads": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
    "required": ["experiment"],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: str | None = None
    N: int | None = None
    n: int | None = None
    sigma: float | None = None
    seed: int = 0
    variants: list = field(default_factory=lambda: ["dynamic-fista"])
    beta: float | None = None
    theta0: list | None = None
    budget: int | None = None
    trust_region: dict = field(default_factory=dict)
    recon_iters: int = 2000
    reference: bool = False
    threads: int = 1
    out: str | None = None

    def output_root(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, DEFAULT_OUT))

    def tr_config(self, default_budget: int) -> TrustRegionConfig:
        opts = dict(self.trust_region)
        if self.budget is not None:
            opts["eval_budget"] = self.budget
        opts.setdefault("eval_budget", default_budget)
        try:
            return TrustRegionConfig(**opts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trust_region: {exc}") from exc

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def validate(doc: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc
    cfg = ExperimentConfig(**doc)
    for name in cfg.variants:
        try:
            Variant.parse(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg.dataset is not None and not Path(cfg.dataset).is_file():
        raise ConfigError(f"dataset {cfg.dataset} does not exist")
    return cfg


def load(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (optional) and apply non-``None`` overrides before validating."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "trust_region":
            doc.setdefault("trust_region", {}).update(value)
        else:
            doc[key] = value
    return validate(doc)
