"""Scenario files: JSON schema, canonical serialisation and bundled presets.

Units in files: km, veh/km, veh/h, and seconds for times.  Library calls use
hours; conversion happens in :meth:`RunSettings.horizon_h` and friends.

Besides the canonical layout (explicit per-cell lengths and densities) the
reader accepts two shorthands: ``segment.d`` with ``segment.cell_length_km``,
and ``initial.background_veh_per_km`` with ``initial.blocks``.  Serialisation
always writes the canonical layout, so parse(serialise(s)) == s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .flux import CBParams, ChanutBuissonFlux, DaganzoFlux, DaganzoParams, model_from_dict, model_to_dict
from .model import SegmentConfig
from .traveltime import TravelTimeQuery

SCHEMA_VERSION = 1
SECONDS_PER_HOUR = 3600.0


class ScenarioError(ValueError):
    """Malformed scenario document."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

_MFD_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["type", "v_f", "w", "q_max", "rho_jam"],
            "properties": {
                "type": {"const": "daganzo"},
                "v_f": _POS, "w": _POS, "q_max": _POS, "rho_jam": _POS,
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["type", "v_f1", "v_f2", "v_c", "L1", "L2", "N", "beta"],
            "properties": {
                "type": {"const": "chanut_buisson"},
                "v_f1": _POS, "v_f2": _POS, "v_c": _POS, "L1": _POS, "L2": _POS,
                "N": {"type": "integer", "minimum": 1}, "beta": _POS,
            },
        },
    ]
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "segment", "mfd", "boundary", "initial", "run"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "segment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["classes"],
            "properties": {
                "lengths_km": {"type": "array", "items": _POS, "minItems": 1},
                "d": {"type": "integer", "minimum": 1},
                "cell_length_km": _POS,
                "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        },
        "mfd": {"oneOf": [_MFD_SCHEMA, {"type": "array", "items": _MFD_SCHEMA, "minItems": 2}]},
        "boundary": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lambda_veh_per_h", "nu_veh_per_h"],
            "properties": {
                "lambda_veh_per_h": {"type": "array", "items": _NONNEG},
                "nu_veh_per_h": {"type": "array", "items": _NONNEG},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "density_veh_per_km": {"type": "array", "items": {"type": "array", "items": _NONNEG}},
                "background_veh_per_km": {"type": "array", "items": _NONNEG},
                "blocks": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["cells", "density_veh_per_km"],
                        "properties": {
                            "cells": {
                                "type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 2, "maxItems": 2,
                            },
                            "density_veh_per_km": {"type": "array", "items": _NONNEG},
                        },
                    },
                },
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "required": ["horizon_s", "snapshot_dt_s"],
            "properties": {
                "horizon_s": _POS,
                "snapshot_dt_s": _POS,
                "replications": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "max_step_s": {"oneOf": [_POS, {"type": "null"}]},
            },
        },
        "queries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["origin_cell", "offset", "class", "t_s", "grid_s"],
                "properties": {
                    "origin_cell": {"type": "integer", "minimum": 1},
                    "offset": {"type": "integer", "minimum": 0},
                    "class": {"type": "integer", "minimum": 1},
                    "t_s": _NONNEG,
                    "grid_s": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["start", "stop", "step"],
                        "properties": {"start": _NONNEG, "stop": _NONNEG, "step": _POS},
                    },
                },
            },
        },
        "validate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lengths_km"],
            "properties": {
                "lengths_km": {"type": "array", "items": _POS, "minItems": 1},
                "horizon_s_per_km": _POS,
                "snapshot_dt_s_per_km": _POS,
                "band_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "std_rel_tol": _POS,
                "kink_margin_veh_per_km": _NONNEG,
            },
        },
    },
}


@dataclass(frozen=True)
class RunSettings:
    horizon_s: float
    snapshot_dt_s: float
    replications: int = 100
    seed: int = 0
    max_step_s: float | None = None

    @property
    def horizon_h(self) -> float:
        return self.horizon_s / SECONDS_PER_HOUR

    @property
    def snapshot_dt_h(self) -> float:
        return self.snapshot_dt_s / SECONDS_PER_HOUR

    @property
    def max_step_h(self) -> float | None:
        return None if self.max_step_s is None else self.max_step_s / SECONDS_PER_HOUR


@dataclass(frozen=True)
class QuerySpec:
    origin_cell: int
    offset: int
    cls: int
    t_s: float
    start: float
    stop: float
    step: float

    def grid(self) -> tuple[float, ...]:
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9))
        return tuple(float(self.start + k * self.step) for k in range(n + 1))

    def query(self) -> TravelTimeQuery:
        return TravelTimeQuery(self.origin_cell, self.offset, self.cls, self.t_s, self.grid())


@dataclass(frozen=True)
class ValidateSettings:
    lengths_km: tuple[float, ...]
    horizon_s_per_km: float = 1000.0
    snapshot_dt_s_per_km: float = 1.0
    band_fraction: float = 0.95
    std_rel_tol: float = 0.15
    kink_margin_veh_per_km: float = 2.0


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SegmentConfig
    run: RunSettings
    queries: tuple[QuerySpec, ...] = ()
    validate: ValidateSettings | None = None
    description: str = ""

    def with_overrides(self, seed: int | None = None, replications: int | None = None) -> "Scenario":
        run = self.run
        if seed is not None:
            run = replace(run, seed=seed)
        if replications is not None:
            run = replace(run, replications=replications)
        return replace(self, run=run)


def _expand_lengths(seg: dict) -> list[float]:
    if "lengths_km" in seg:
        if "d" in seg and seg["d"] != len(seg["lengths_km"]):
            raise ScenarioError("segment.d disagrees with len(segment.lengths_km)")
        return [float(x) for x in seg["lengths_km"]]
    if "d" in seg and "cell_length_km" in seg:
        return [float(seg["cell_length_km"])] * seg["d"]
    raise ScenarioError("segment needs lengths_km, or d with cell_length_km")


def _expand_density(block: dict, d: int, m: int) -> np.ndarray:
    if "density_veh_per_km" in block:
        if "blocks" in block or "background_veh_per_km" in block:
            raise ScenarioError("initial: give density_veh_per_km or background/blocks, not both")
        rho = np.array(block["density_veh_per_km"], dtype=float)
        if rho.shape != (d, m):
            raise ScenarioError(f"initial.density_veh_per_km must be {d} rows of {m} values")
        return rho
    rho = np.zeros((d, m))
    if "background_veh_per_km" in block:
        bg = block["background_veh_per_km"]
        if len(bg) != m:
            raise ScenarioError(f"initial.background_veh_per_km needs {m} values")
        rho[:] = bg
    for b in block.get("blocks", []):
        lo, hi = b["cells"]
        if not 1 <= lo <= hi <= d:
            raise ScenarioError(f"initial block cells {b['cells']} outside 1..{d}")
        if len(b["density_veh_per_km"]) != m:
            raise ScenarioError(f"initial block density needs {m} values")
        rho[lo - 1 : hi] = b["density_veh_per_km"]
    return rho


def scenario_from_dict(doc: dict) -> Scenario:
    """Validate and build a scenario; raises ScenarioError with the offending path."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"schema error at {where}: {exc.message}") from None
    seg = doc["segment"]
    lengths = _expand_lengths(seg)
    d, m = len(lengths), len(seg["classes"])
    mfd = doc["mfd"]
    try:
        models = tuple(model_from_dict(b) for b in mfd) if isinstance(mfd, list) else (model_from_dict(mfd),)
        rho0 = _expand_density(doc["initial"], d, m)
        config = SegmentConfig(
            tuple(lengths), models, tuple(doc["boundary"]["lambda_veh_per_h"]),
            tuple(doc["boundary"]["nu_veh_per_h"]), rho0.ravel(), tuple(seg["classes"]),
        )
        run = RunSettings(**doc["run"])
        queries = tuple(
            QuerySpec(q["origin_cell"], q["offset"], q["class"], float(q["t_s"]),
                      float(q["grid_s"]["start"]), float(q["grid_s"]["stop"]), float(q["grid_s"]["step"]))
            for q in doc.get("queries", [])
        )
        for q in queries:
            if q.stop < q.start:
                raise ScenarioError("query grid stop must not precede start")
            dt = run.snapshot_dt_s
            for what, v in (("t_s", q.t_s), ("grid_s.start", q.start), ("grid_s.step", q.step)):
                if abs(v / dt - round(v / dt)) > 1e-9:
                    raise ScenarioError(f"query {what} = {v} is not a multiple of run.snapshot_dt_s = {dt}")
            q.query().validate(config)
        val = doc.get("validate")
        validate = None
        if val is not None:
            validate = ValidateSettings(**{**val, "lengths_km": tuple(float(x) for x in val["lengths_km"])})
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(doc.get("name", ""), config, run, queries, validate, doc.get("description", ""))


def scenario_to_dict(sc: Scenario) -> dict:
    """Canonical document of a scenario."""
    cfg = sc.config
    models = cfg.models
    mfd: Any = model_to_dict(models[0]) if all(x == models[0] for x in models) else [model_to_dict(x) for x in models]
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "description": sc.description,
        "segment": {"lengths_km": list(cfg.lengths), "classes": list(cfg.class_names)},
        "mfd": mfd,
        "boundary": {"lambda_veh_per_h": list(cfg.arrival_rates), "nu_veh_per_h": list(cfg.departure_rates)},
        "initial": {"density_veh_per_km": cfg.initial_density.reshape(cfg.d, cfg.m).tolist()},
        "run": {
            "horizon_s": sc.run.horizon_s, "snapshot_dt_s": sc.run.snapshot_dt_s,
            "replications": sc.run.replications, "seed": sc.run.seed, "max_step_s": sc.run.max_step_s,
        },
    }
    if sc.queries:
        doc["queries"] = [
            {"origin_cell": q.origin_cell, "offset": q.offset, "class": q.cls, "t_s": q.t_s,
             "grid_s": {"start": q.start, "stop": q.stop, "step": q.step}}
            for q in sc.queries
        ]
    if sc.validate is not None:
        v = sc.validate
        doc["validate"] = {
            "lengths_km": list(v.lengths_km), "horizon_s_per_km": v.horizon_s_per_km,
            "snapshot_dt_s_per_km": v.snapshot_dt_s_per_km, "band_fraction": v.band_fraction,
            "std_rel_tol": v.std_rel_tol, "kink_margin_veh_per_km": v.kink_margin_veh_per_km,
        }
    return doc


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc)


def dump_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2) + "\n")


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

VALIDATION_MFD = DaganzoParams(v_f=100.0, w=20.0, q_max=1800.0, rho_jam=105.0)
CB_PARAMS = CBParams(v_f1=108.0, v_f2=79.2, v_c=61.2, L1=0.0065, L2=0.0165, N=3, beta=0.25)
TRUCK_SHARE = 0.2
# unit-free departure rate 1.2 read as vehicles per second
BACKWARD_JAM_NU = 1.2 * SECONDS_PER_HOUR
# the segment end never binds in these runs
FREE_OUTFLOW = 1.0e4


def _mix(total: float) -> list[float]:
    return [total * (1 - TRUCK_SHARE), total * TRUCK_SHARE]


def validation(ell: float, replications: int = 1000, seed: int = 2024) -> Scenario:
    cfg = SegmentConfig((ell,) * 3, (DaganzoFlux(VALIDATION_MFD),), (0.0,), (900.0,), [70.0, 90.0, 40.0], ("car",))
    return Scenario(
        f"validation-l{ell:g}", cfg,
        RunSettings(1000.0 * ell, float(ell), replications, seed),
        validate=ValidateSettings((1.0, 2.0, 5.0, 10.0)),
        description="three Daganzo cells from (70, 90, 40) veh/km, draining at 900 veh/h",
    )


def closed_system(seed: int = 7) -> Scenario:
    cfg = SegmentConfig((1.0,) * 3, (DaganzoFlux(VALIDATION_MFD),), (0.0,), (0.0,), [70.0, 90.0, 40.0], ("car",))
    return Scenario(
        "closed-system", cfg, RunSettings(1000.0, 10.0, 100, seed),
        validate=ValidateSettings((1.0,), 1000.0, 10.0),
        description="no arrivals and no departures: vehicles only move between cells",
    )


def forward_propagation(seed: int = 11) -> Scenario:
    d = 100
    rho = np.zeros((d, 2))
    rho[:5] = _mix(60.0)
    cfg = SegmentConfig(
        (0.6,) * d, (ChanutBuissonFlux(CB_PARAMS),), (0.0, 0.0), (FREE_OUTFLOW,) * 2, rho.ravel(), ("car", "truck"),
    )
    return Scenario(
        "forward-propagation", cfg, RunSettings(2000.0, 2.0, 20, seed),
        description="platoon of 60 veh/km (20% trucks) in cells 1-5 spreading downstream",
    )


def tt_example(seed: int = 11) -> Scenario:
    base = forward_propagation(seed)
    queries = tuple(QuerySpec(10, 39, j, 200.0, 0.0, 2000.0, 2.0) for j in (1, 2))
    return replace(
        base, name="tt-example", run=replace(base.run, horizon_s=2200.0), queries=queries,
        description="travel time from cell 10 at 200 s to the exit of cell 49 (entry of cell 50)",
    )


def backward_jam(seed: int = 13) -> Scenario:
    d = 20
    rho = np.tile(_mix(88.0), (d, 1))
    rho[7:12] = _mix(300.0)
    cfg = SegmentConfig(
        (1.0,) * d, (ChanutBuissonFlux(CB_PARAMS),), (4800.0, 960.0), (BACKWARD_JAM_NU,) * 2,
        rho.ravel(), ("car", "truck"),
    )
    return Scenario(
        "backward-jam", cfg, RunSettings(1500.0, 1.0, 20, seed),
        description="jam of 300 veh/km in cells 8-12 moving upstream against heavy arrivals",
    )


def shocks(seed: int = 17) -> Scenario:
    d = 40
    rho = np.zeros((d, 2))
    rho[19:24] = _mix(350.0)
    rho[4:9] = _mix(200.0)
    cfg = SegmentConfig(
        (0.6,) * d, (ChanutBuissonFlux(CB_PARAMS),), (0.0, 0.0), (FREE_OUTFLOW,) * 2, rho.ravel(), ("car", "truck"),
    )
    return Scenario(
        "shocks", cfg, RunSettings(500.0, 1.0, 20, seed),
        description="a fast 200 veh/km platoon catching a dense 350 veh/km one",
    )


def toy(seed: int = 5) -> Scenario:
    """Two cells whose rates stay affine, so the Gaussian moments are exact."""
    cfg = SegmentConfig((2.0, 2.0), (DaganzoFlux(VALIDATION_MFD),), (600.0,), (1800.0,), [10.0, 5.0], ("car",))
    return Scenario("toy-d2", cfg, RunSettings(360.0, 36.0, 5000, seed), description="two-cell Daganzo toy")


def empty_road(seed: int = 0) -> Scenario:
    cfg = SegmentConfig((1.0,) * 3, (DaganzoFlux(VALIDATION_MFD),), (0.0,), (900.0,), [0.0, 0.0, 0.0], ("car",))
    return Scenario("empty-road", cfg, RunSettings(100.0, 10.0, 10, seed), description="nothing ever happens")


PRESETS = {
    "validation-l1": lambda: validation(1.0),
    "validation-l2": lambda: validation(2.0),
    "validation-l5": lambda: validation(5.0),
    "validation-l10": lambda: validation(10.0),
    "closed-system": closed_system,
    "forward-propagation": forward_propagation,
    "tt-example": tt_example,
    "backward-jam": backward_jam,
    "shocks": shocks,
    "toy-d2": toy,
    "empty-road": empty_road,
}


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ScenarioError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def family(sc: Scenario, ell: float) -> Scenario:
    """Member of a validation family: all cells of length ``ell``, horizon scaled with it."""
    v = sc.validate
    if v is None:
        raise ScenarioError(f"scenario {sc.name!r} has no validate block")
    cfg = sc.config.with_lengths((ell,) * sc.config.d)
    run = replace(sc.run, horizon_s=v.horizon_s_per_km * ell, snapshot_dt_s=v.snapshot_dt_s_per_km * ell)
    return replace(sc, name=f"{sc.name}@l{ell:g}", config=cfg, run=run)


__all__ = [
    "SCHEMA", "SCHEMA_VERSION", "PRESETS", "QuerySpec", "RunSettings", "Scenario", "ScenarioError",
    "ValidateSettings", "dump_scenario", "family", "load_scenario", "preset", "scenario_from_dict",
    "scenario_to_dict",
]
