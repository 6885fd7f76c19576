"""Instance configuration files: one JSON document per market instance.

Top-level keys::

    {
      "demand": {"kind": "step" | "grid" | "gp" | "tree" | "example2", ...},
      "price": {"kind": "linear" | "monomial" | "counterexample" | "polynomial" | "bernstein", ...},
      "constraints": {"box": [lo, hi], "power": g, "capacity": c, "ramp": r},
      "grid": {"n": 96},
      "seed": 42,
      "tolerances": {"projection": 1e-9, "rev": 1e-9, "poa": null}
    }

Only ``demand`` and ``price`` are required.  Parsing normalizes the demand
fragment (defaults filled in), so ``from_dict(cfg.to_dict()) == cfg``.
Errors carry the JSON line/column for syntax problems and a dotted field
path otherwise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .demand import (
    DEFAULT_SEED,
    DemandPath,
    GPDemandModel,
    StepDemand,
    TimeGrid,
    build_tree,
    example2_path,
    sample_gp_path,
    step_from_params,
)
from .feasible import FeasibleSet
from .prices import price_from_dict, price_to_dict

TOP_KEYS = ("demand", "price", "constraints", "grid", "seed", "tolerances")
DEFAULT_GRID_N = 96
DEFAULT_TOLERANCES = {"projection": 1e-9, "rev": 1e-9, "poa": None}

# allowed keys and defaults per demand kind; None marks "required"
_DEMAND_FIELDS = {
    "step": {"x": None, "eps": None, "d1": None, "d2": None, "t1": None, "lo": 0.0, "hi": 1.0},
    "grid": {"values": None, "lo": 0.0, "hi": 1.0},
    "gp": {
        "base": 0.7,
        "amplitude": 0.2,
        "length_scale": 0.1,
        "sigma_max": 0.08,
        "jitter": 1e-8,
    },
    "tree": {
        "depth": None,
        "branching": 2,
        "value_rule": "binary-updown",
        "prob_rule": "uniform",
        "start": 0.5,
        "step": 0.2,
        "lo": 0.0,
        "hi": 1.0,
    },
    "example2": {},
}


class ConfigError(ValueError):
    """Invalid configuration; ``where`` is a field path or ``line L col C``."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where
        self.message = message


def _num(spec: dict, key: str, path: str, lo=None, hi=None, integer: bool = False):
    v = spec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if integer:
        if float(v) != int(v):
            raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(f"{path}.{key}", "must be finite")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}.{key}", f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}.{key}", f"must be <= {hi}, got {v}")
    return v


def normalize_demand(spec) -> dict:
    """Check a demand fragment and return it with every default filled in."""
    path = "demand"
    if not isinstance(spec, dict):
        raise ConfigError(path, "expected an object")
    kind = spec.get("kind")
    if kind not in _DEMAND_FIELDS:
        raise ConfigError(f"{path}.kind", f"expected one of {sorted(_DEMAND_FIELDS)}, got {kind!r}")
    allowed = _DEMAND_FIELDS[kind]
    unknown = sorted(set(spec) - set(allowed) - {"kind"})
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", f"unknown field for demand kind {kind!r}")
    out = {"kind": kind}
    if kind == "step":
        by_params = "x" in spec or "eps" in spec
        by_levels = any(k in spec for k in ("d1", "d2", "t1"))
        if by_params == by_levels:
            raise ConfigError(path, "step demand needs either x and eps, or d1, d2 and t1")
        keys = ("x", "eps") if by_params else ("d1", "d2", "t1")
        for k in keys:
            if k not in spec:
                raise ConfigError(f"{path}.{k}", "missing")
            out[k] = _num(spec, k, path)
        if by_params:
            if not 0.0 < out["x"] < 1.0:
                raise ConfigError(f"{path}.x", "must lie in (0, 1)")
            if not 0.0 < out["eps"] <= 1.0:
                raise ConfigError(f"{path}.eps", "must lie in (0, 1]")
        elif not 0.0 < out["t1"] < 1.0:
            raise ConfigError(f"{path}.t1", "must lie in (0, 1)")
    elif kind == "grid":
        vals = spec.get("values")
        if not isinstance(vals, list) or len(vals) < 2:
            raise ConfigError(f"{path}.values", "expected a list of at least two numbers")
        for i, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{path}.values[{i}]", f"expected a finite number, got {v!r}")
        out["values"] = [float(v) for v in vals]
    elif kind == "gp":
        for k, default in allowed.items():
            out[k] = _num(spec, k, path) if k in spec else default
        if out["length_scale"] <= 0:
            raise ConfigError(f"{path}.length_scale", "must be positive")
    elif kind == "tree":
        if "depth" not in spec:
            raise ConfigError(f"{path}.depth", "missing")
        out["depth"] = _num(spec, "depth", path, lo=1, integer=True)
        out["branching"] = _num(spec, "branching", path, lo=1, integer=True) if "branching" in spec else 2
        rule = spec.get("value_rule", "binary-updown")
        if rule != "binary-updown":
            ok = (
                isinstance(rule, list)
                and len(rule) == out["depth"]
                and all(isinstance(r, list) and len(r) == out["branching"] for r in rule)
            )
            if not ok:
                raise ConfigError(f"{path}.value_rule", "expected 'binary-updown' or a depth x branching table")
            rule = [[float(v) for v in row] for row in rule]
        out["value_rule"] = rule
        prob = spec.get("prob_rule", "uniform")
        if prob not in ("uniform", "random"):
            if not isinstance(prob, list) or len(prob) != out["branching"]:
                raise ConfigError(f"{path}.prob_rule", "expected 'uniform', 'random' or one probability per branch")
            prob = [float(p) for p in prob]
        out["prob_rule"] = prob
        out["start"] = _num(spec, "start", path) if "start" in spec else 0.5
        out["step"] = _num(spec, "step", path) if "step" in spec else 0.2
    for k in ("lo", "hi"):
        if k in allowed:
            out[k] = _num(spec, k, path) if k in spec else allowed[k]
    if "lo" in out and out["lo"] > out["hi"]:
        raise ConfigError(f"{path}.lo", "must not exceed hi")
    return out


def _tolerances(spec) -> dict:
    if spec is None:
        return dict(DEFAULT_TOLERANCES)
    if not isinstance(spec, dict):
        raise ConfigError("tolerances", "expected an object")
    unknown = sorted(set(spec) - set(DEFAULT_TOLERANCES))
    if unknown:
        raise ConfigError(f"tolerances.{unknown[0]}", "unknown tolerance")
    out = dict(DEFAULT_TOLERANCES)
    for k in spec:
        if spec[k] is None:
            out[k] = None
        else:
            out[k] = _num(spec, k, "tolerances", lo=0.0)
    return out


@dataclass(frozen=True, eq=False)
class InstanceConfig:
    """A parsed instance: normalized demand fragment, price, constraints and settings."""

    demand: dict
    price: object
    constraints: FeasibleSet = field(default_factory=FeasibleSet)
    grid_n: int = DEFAULT_GRID_N
    seed: int = DEFAULT_SEED
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def __eq__(self, other):
        if not isinstance(other, InstanceConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def build_demand(self):
        """Materialize the demand object (GP and random trees use ``seed``)."""
        return build_demand(self.demand, self.grid_n, self.seed)

    def to_dict(self) -> dict:
        return {
            "demand": dict(self.demand),
            "price": price_to_dict(self.price),
            "constraints": self.constraints.to_dict(),
            "grid": {"n": self.grid_n},
            "seed": self.seed,
            "tolerances": dict(self.tolerances),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def build_demand(spec: dict, grid_n: int = DEFAULT_GRID_N, seed: int = DEFAULT_SEED):
    kind = spec["kind"]
    if kind == "step":
        if "x" in spec:
            D = step_from_params(spec["x"], spec["eps"])
            return StepDemand(D.d1, D.d2, D.t1, spec["lo"], spec["hi"])
        return StepDemand(spec["d1"], spec["d2"], spec["t1"], spec["lo"], spec["hi"])
    if kind == "grid":
        vals = np.asarray(spec["values"], dtype=float)
        return DemandPath(TimeGrid(vals.size), vals, spec["lo"], spec["hi"])
    if kind == "gp":
        params = {k: spec[k] for k in ("base", "amplitude", "length_scale", "sigma_max", "jitter")}
        return sample_gp_path(GPDemandModel(**params, seed=seed), TimeGrid(grid_n), seed)
    if kind == "tree":
        return build_tree(
            spec["depth"], spec["branching"], spec["value_rule"], spec["prob_rule"], seed,
            spec["start"], spec["step"], spec["lo"], spec["hi"],
        )
    if kind == "example2":
        return example2_path(TimeGrid(grid_n))
    raise ConfigError("demand.kind", f"unknown kind {kind!r}")


def from_dict(doc) -> InstanceConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = sorted(set(doc) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown top-level key")
    for key in ("demand", "price"):
        if key not in doc:
            raise ConfigError(key, "missing")
    demand = normalize_demand(doc["demand"])
    try:
        price = price_from_dict(doc["price"])
    except KeyError as exc:
        raise ConfigError(f"price.{exc.args[0]}", "missing") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError("price", str(exc)) from None
    try:
        constraints = FeasibleSet.from_dict(doc.get("constraints"))
    except (ValueError, TypeError) as exc:
        raise ConfigError("constraints", str(exc)) from None
    grid = doc.get("grid") or {}
    if not isinstance(grid, dict) or set(grid) - {"n"}:
        raise ConfigError("grid", 'expected {"n": integer}')
    grid_n = _num(grid, "n", "grid", lo=2, integer=True) if "n" in grid else DEFAULT_GRID_N
    if demand["kind"] == "grid":
        if "n" in grid and grid_n != len(demand["values"]):
            raise ConfigError("grid.n", f"does not match the {len(demand['values'])} demand values")
        grid_n = len(demand["values"])
    seed = _num(doc, "seed", "<root>", lo=0, integer=True) if "seed" in doc else DEFAULT_SEED
    cfg = InstanceConfig(demand, price, constraints, grid_n, seed, _tolerances(doc.get("tolerances")))
    try:
        cfg.build_demand()
    except ConfigError:
        raise
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError("demand", str(exc)) from None
    return cfg


def loads(text: str) -> InstanceConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} col {exc.colno}", exc.msg) from None
    return from_dict(doc)


def load(path) -> InstanceConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
    return loads(text)
