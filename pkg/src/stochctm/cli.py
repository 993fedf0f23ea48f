"""Command-line entry point: ``stochctm {simulate,approximate,traveltime,validate,presets}``.

Each command reads one scenario (``--scenario PATH`` or ``--preset NAME``) and
writes long-format CSV tables plus ``metadata.json`` into ``--out DIR``.
Exit codes: 0 ok, 2 scenario/schema/IO error, 3 numerical fault,
4 failed validation check.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy

from . import __version__
from .ctmc import SEED_SCHEME, replicate
from .diffusion import CovarianceFault, solve_covariance_rho
from .fluid import StepSizeError, solve_fluid
from .model import SegmentConfig
from .scenarios import PRESETS, Scenario, ScenarioError, dump_scenario, load_scenario, preset, scenario_to_dict
from .traveltime import approximate_counts, travel_time_cdf

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4
HEADER = ("time_s", "cell", "class", "value", "unit")
Z95 = 1.959963984540054


def _fmt(x: float) -> str:
    return repr(float(x))


def write_table(path: Path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, cell, cls, value, unit in rows:
            w.writerow((_fmt(t), cell, cls, _fmt(value), unit))


def field_rows(config: SegmentConfig, times_h: np.ndarray, values: np.ndarray, unit: str,
               totals: np.ndarray | None = None):
    """Rows of a (n_t, d*m) field, optionally followed per cell by a (n_t, d) class total."""
    d, m = config.d, config.m
    names = config.class_names
    for k, t in enumerate(times_h):
        ts = t * 3600.0
        row = values[k].reshape(d, m)
        for i in range(d):
            for j in range(m):
                yield ts, i + 1, names[j], row[i, j], unit
            if totals is not None:
                yield ts, i + 1, "total", totals[k, i], unit


def _metadata(sc: Scenario, command: str, started: float, extra: dict | None = None) -> dict:
    meta = {
        "command": command,
        "scenario": scenario_to_dict(sc),
        "seed_scheme": SEED_SCHEME,
        "versions": {
            "stochctm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": time.perf_counter() - started,
    }
    meta.update(extra or {})
    return meta


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_simulate(sc: Scenario, out: Path, workers: int = 1) -> int:
    started = time.perf_counter()
    cfg, run = sc.config, sc.run
    est = replicate(cfg, run.horizon_h, run.snapshot_dt_h, run.replications, run.seed, workers=workers)
    write_table(out / "sim_mean.csv", field_rows(cfg, est.times, est.mean, "veh/km"))
    write_table(out / "sim_std.csv", field_rows(cfg, est.times, est.std, "veh/km"))
    write_table(out / "sim_stderr.csv", field_rows(cfg, est.times, est.stderr, "veh/km"))
    _write_json(out / "metadata.json", _metadata(sc, "simulate", started, {"replications": est.R}))
    return EXIT_OK


def cmd_approximate(sc: Scenario, out: Path) -> int:
    started = time.perf_counter()
    cfg, run = sc.config, sc.run
    fluid = solve_fluid(cfg, run.horizon_h, run.snapshot_dt_h, max_step=run.max_step_h)
    approx = solve_covariance_rho(cfg, fluid, store_full=False)
    d, m = cfg.d, cfg.m
    totals = fluid.rho.reshape(-1, d, m).sum(axis=2) if m > 1 else None
    tot_std = np.sqrt(np.maximum(approx.var_total, 0.0)) if m > 1 else None
    std = approx.std
    write_table(out / "fluid_mean.csv", field_rows(cfg, fluid.times, fluid.rho, "veh/km", totals))
    write_table(out / "diffusion_std.csv", field_rows(cfg, fluid.times, std, "veh/km", tot_std))
    for name, sign in (("band95_lower.csv", -1.0), ("band95_upper.csv", 1.0)):
        tb = None if totals is None else totals + sign * Z95 * tot_std
        write_table(out / name, field_rows(cfg, fluid.times, fluid.rho + sign * Z95 * std, "veh/km", tb))
    _write_json(out / "metadata.json", _metadata(
        sc, "approximate", started, {"min_covariance_eigenvalue_rel": approx.min_eigenvalue},
    ))
    return EXIT_OK


def cmd_traveltime(sc: Scenario, out: Path) -> int:
    started = time.perf_counter()
    cfg = sc.config
    summary = []
    if sc.queries:
        queries = [q.query() for q in sc.queries]
        approx = approximate_counts(cfg, queries, sc.run.snapshot_dt_s, sc.run.max_step_s)
        cdf_rows, pdf_rows = [], []
        for n, q in enumerate(queries):
            dist = travel_time_cdf(cfg, q, approx)
            pdf = dist.pdf
            name = cfg.class_names[q.j - 1]
            for x, F, f in zip(dist.x, dist.cdf, pdf):
                cdf_rows.append((n + 1, x, q.i, name, F, "1"))
                pdf_rows.append((n + 1, x, q.i, name, f, "1/s"))
            entry = {"query": n + 1, "origin_cell": q.i, "offset": q.k, "class": name, "t_s": q.t}
            for p in (0.05, 0.5, 0.95):
                try:
                    entry[f"q{int(p * 100):02d}_s"] = dist.quantile(p)
                except ValueError:
                    entry[f"q{int(p * 100):02d}_s"] = None
            entry["max_cdf_decrease"] = dist.max_decrease
            summary.append(entry)
        for fname, rows in (("traveltime_cdf.csv", cdf_rows), ("traveltime_pdf.csv", pdf_rows)):
            with open(out / fname, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("query",) + HEADER)
                for qn, x, cell, cls, value, unit in rows:
                    w.writerow((qn, _fmt(x), cell, cls, _fmt(value), unit))
    _write_json(out / "metadata.json", _metadata(sc, "traveltime", started, {"queries": summary}))
    return EXIT_OK


def cmd_validate(sc: Scenario, out: Path, replications: int | None = None, workers: int = 1) -> int:
    from .validation import validate_family

    started = time.perf_counter()
    if sc.validate is None:
        raise ScenarioError(f"scenario {sc.name!r} has no validate block")
    report = validate_family(sc, replications, workers=workers)
    doc = report.to_dict()
    doc["wall_time_s"] = time.perf_counter() - started
    _write_json(out / "report.json", doc)
    _write_json(out / "metadata.json", _metadata(sc, "validate", started))
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _scenario(args) -> Scenario:
    if (args.scenario is None) == (args.preset is None):
        raise ScenarioError("give exactly one of --scenario or --preset")
    sc = load_scenario(args.scenario) if args.scenario else preset(args.preset)
    return sc.with_overrides(seed=args.seed, replications=args.replications)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochctm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stochctm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "replicate the exact process and write moment tables"),
        ("approximate", "write fluid mean, diffusion std and 95% bands"),
        ("traveltime", "write travel-time CDF and PDF grids for the scenario queries"),
        ("validate", "compare simulation and approximation over the cell-length family"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--scenario", type=Path, help="scenario JSON file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="bundled scenario")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--replications", type=int, help="override run.replications")
        if name in ("simulate", "validate"):
            p.add_argument("--workers", type=int, default=1, help="worker processes for replications")
    p = sub.add_parser("presets", help="list bundled scenarios, or write them as JSON")
    p.add_argument("--out", type=Path, help="directory to write <name>.json files into")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            for name in sorted(PRESETS):
                if args.out is not None:
                    args.out.mkdir(parents=True, exist_ok=True)
                    dump_scenario(preset(name), args.out / f"{name}.json")
                print(name)
            return EXIT_OK
        sc = _scenario(args)
        if args.seed is not None and args.seed < 0:
            raise ScenarioError("--seed must be nonnegative")
        if args.replications is not None and args.replications < 2:
            raise ScenarioError("--replications must be at least 2")
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(sc, args.out, args.workers)
        if args.command == "approximate":
            return cmd_approximate(sc, args.out)
        if args.command == "traveltime":
            return cmd_traveltime(sc, args.out)
        return cmd_validate(sc, args.out, workers=args.workers)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (CovarianceFault, StepSizeError, FloatingPointError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
