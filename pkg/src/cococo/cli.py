"""Command-line front end: ``cococo {simulate,optimize,baseline,sweep,sla}``.

Every run writes ``manifest.json`` (resolved config plus package version) next
to its outputs. Passing that manifest back as ``--config`` reproduces the run
byte for byte. Wall time and worker count go to ``timing_<command>.json`` so
they never perturb the reproducible files.

Exit codes: 0 success (an infeasible design is a result, not a failure),
2 configuration error, 3 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from .codesign import feasibility_region_sweep, optimize, saa_objective, topdown_baseline
from .comm_channel import link_reliability
from .config import (ConfigError, ExperimentConfig, build_grid, build_plant, build_problem,
                     build_template, load_config, sweep_points)
from .controller import instantiate
from .dependability import fit_reliability_regression
from .sim_engine import KPI_NAMES, episode_seeds, monte_carlo, run_episode

log = logging.getLogger("cococo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST_VERSION = 1
# run-local settings that must not leak into reproducible outputs
_VOLATILE = ("out", "workers")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def write_json(path: Path, obj) -> None:
    # non-finite numbers are written as Infinity / NaN tokens
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in _plain(list(row))])


def _manifest_config(cfg: ExperimentConfig) -> dict:
    doc = cfg.resolved()
    for key in _VOLATILE:
        doc["run"].pop(key, None)
    return doc


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(_manifest_config(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig) -> None:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "artifact": "artifact",
        "version": _version(),
        "command": command,
        "config": _manifest_config(cfg),
        "config_sha256": config_digest(cfg),
    }
    write_json(out / "manifest.json", manifest)


# -- subcommands -------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    plant = build_plant(cfg.plant)
    template = build_template(cfg, plant)
    grid = build_grid(cfg.controller_grid)
    if cfg.run.candidate >= len(grid):
        raise ConfigError(f"run.candidate: index {cfg.run.candidate} outside grid of {len(grid)}")
    spec = instantiate(grid[cfg.run.candidate], plant, template.effective_sampling_period)
    template = template.replace(controller=spec)
    seed = cfg.run.seed

    sc, dist = episode_seeds(seed, 0)
    trace, _ = run_episode(template.replace(scenario_seed=sc, disturbance_seed=dist))
    write_csv(out / "trace.csv", trace.rows())
    write_csv(out / "packets_ul.csv", trace.packet_rows("ul"))
    write_csv(out / "packets_dl.csv", trace.packet_rows("dl"))

    mc = monte_carlo(template, cfg.run.n_episodes, seed, workers)
    write_csv(out / "kpis.csv", [["episode", *KPI_NAMES]]
              + [[e, *(getattr(k, n) for n in KPI_NAMES)] for e, k in enumerate(mc.kpis)])
    write_json(out / "kpi.json", {"controller": spec.to_dict(), "n_episodes": len(mc.kpis),
                                  "aggregate": mc.aggregates,
                                  "episodes": [k.as_dict() for k in mc.kpis]})
    return {"episodes": len(mc.kpis)}


def _write_comparison(out: Path, digest: str) -> None:
    paths = out / "report_optimize.json", out / "report_baseline.json"
    if not all(p.exists() for p in paths):
        return
    docs = [json.loads(p.read_text()) for p in paths]
    if any(d.get("config_sha256") != digest for d in docs):
        return
    cd, bl = docs
    ci = math.hypot(cd["q1_ci"], bl["q1_ci"])
    table = {"codesign_q1": cd["q1_estimate"], "baseline_q1": bl["q1_estimate"],
             "delta_q1": cd["q1_estimate"] - bl["q1_estimate"], "combined_ci": ci,
             "codesign_q2": cd["q2_estimate"], "baseline_q2": bl["q2_estimate"],
             "codesign_feasible": cd["feasible"], "baseline_feasible": bl["feasible"]}
    write_json(out / "comparison.json", table)
    write_csv(out / "comparison.csv", [list(table), list(table.values())])


def _design(cfg: ExperimentConfig, out: Path, workers: int, method: str) -> dict:
    problem = build_problem(cfg, workers)
    run = optimize if method == "optimize" else topdown_baseline
    report = run(problem, cfg.run.seed)
    doc = report.to_dict()
    doc["config_sha256"] = config_digest(cfg)
    write_json(out / f"report_{method}.json", doc)
    _write_comparison(out, doc["config_sha256"])
    return {"feasible": report.feasible, "evaluations": report.evaluations,
            "search_wall_time_s": report.wall_time_s}


def cmd_optimize(cfg, out, workers):
    return _design(cfg, out, workers, "optimize")


def cmd_baseline(cfg, out, workers):
    return _design(cfg, out, workers, "baseline")


def cmd_sweep(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    problem = build_problem(cfg, workers)
    points = sweep_points(cfg)
    rows = feasibility_region_sweep(points, problem, cfg.run.seed, cfg.sweep.pareto_kpis)
    names = list(cfg.sweep.grid)
    header = names + ["q1", "q2", "feasible", "pareto"] + [f"kpi_{k}" for k in KPI_NAMES]
    table = [header]
    for r in rows:
        table.append([r["z"][n] for n in names] + [r["q1"], r["q2"], int(r["feasible"]),
                                                   int(r["pareto"])]
                     + [r["kpi"][k] for k in KPI_NAMES])
    write_csv(out / "sweep.csv", table)
    return {"rows": len(rows)}


def sla_pairs(cfg: ExperimentConfig, workers: int) -> list[tuple[float, float]]:
    problem = build_problem(cfg, workers)
    pairs = []
    for z in sweep_points(cfg):
        est = saa_objective(z, problem, cfg.run.seed)
        pairs.append((link_reliability(z), 1.0 - est.q2))
    return pairs


def cmd_sla(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    pairs = sla_pairs(cfg, workers)
    write_csv(out / "sla_pairs.csv", [["r_com", "r_app"]] + [list(p) for p in pairs])
    model = fit_reliability_regression([([r], a) for r, a in pairs])
    results = []
    for target in cfg.sla.targets:
        inv = model.invert(float(target))
        results.append({"target": float(target), "required_r_com": inv.required,
                        "reachable": inv.reachable, "extrapolated": inv.extrapolated,
                        "message": inv.message})
        if not inv.reachable or inv.extrapolated:
            log.warning("target %g: %s", target, inv.message)
    write_json(out / "sla.json", {"axis": cfg.sla.axis, "results": results,
                                  "model": model.to_dict(), "n_pairs": len(pairs)})
    return {"targets": len(results)}


COMMANDS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "baseline": cmd_baseline,
            "sweep": cmd_sweep, "sla": cmd_sla}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cococo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML/JSON config or a previous manifest.json")
        p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
        p.add_argument("--out", default=None, help="output directory (overrides run.out)")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        if name == "sla":
            p.add_argument("--target", type=float, action="append", default=None,
                           help="target application reliability, repeatable")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.override)
        if getattr(args, "target", None):
            overrides.append(f"sla.targets={json.dumps(args.target)}")
        cfg = load_config(args.config, overrides, args.seed)
        out = Path(args.out if args.out is not None else cfg.run.out)
        workers = args.workers if args.workers is not None else cfg.run.workers
        if workers < 1:
            raise ConfigError("--workers must be >= 1")
        # fail fast on semantic problems (bad matrices, horizon too short, ...)
        build_problem(cfg, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg)
        info = COMMANDS[args.command](cfg, out, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    timing = {"command": args.command, "workers": workers,
              "wall_time_s": time.perf_counter() - t0, **info}
    write_json(out / f"timing_{args.command}.json", timing)
    print(json.dumps(_plain(info), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
