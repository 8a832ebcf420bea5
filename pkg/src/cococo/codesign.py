"""Outer stage: sample-average approximation and derivative-free search over ``z``.

``saa_objective`` estimates ``E[Q1]`` (mean over channel scenarios of the
inner-stage optimum) and ``E[Q2]`` (fraction of episodes outside the demand
set). Random streams depend on ``(base_seed, scenario, episode)`` only, never
on ``z``, so every design is evaluated on common random numbers.

``optimize`` runs a compass pattern search on the normalized box of free
coordinates, restarted from the box center and the first points of the
unscrambled Halton sequence. Infeasible points are rejected: they can only
win against other infeasible points, ranked by constraint violation.

``topdown_baseline`` reproduces the classical sequential pipeline: controller
and sampling period chosen under an ideal channel, a tolerance analysis on an
abstract link, then the cheapest link meeting the derived requirement.
"""

from __future__ import annotations

import collections
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .comm_channel import (Budget, CommParams, Link, UnstableQueueError,
                           feasibility_residual, link_reliability, nominal_latency)
from .controller import CandidateRecipe, ControllerSpec, inner_evaluate, instantiate
from .dependability import DemandSet, _proportion, q2
from .sim_engine import (KPI_NAMES, EpisodeConfig, KpiVector, aggregate, parallel_map)

__all__ = [
    "CodesignProblem",
    "SaaEstimate",
    "DesignReport",
    "SearchResult",
    "saa_objective",
    "pattern_search",
    "optimize",
    "topdown_baseline",
    "compare_reports",
    "feasibility_region_sweep",
    "pareto_flags",
]

INTEGER_FIELDS = ("max_retx",)


@dataclass(frozen=True)
class CodesignProblem:
    """Two-stage co-design problem.

    ``z_bounds`` lists the free ``CommParams`` coordinates; every other field
    stays at its value in ``z0``. ``template`` fixes the plant, link modes,
    horizon and initial-condition sampler (its controller is ignored).
    """

    template: EpisodeConfig
    z0: CommParams
    z_bounds: Mapping[str, tuple[float, float]]
    budget: Budget
    demand: DemandSet
    r0: float
    n_outer_samples: int
    n_inner_samples: int
    candidate_grid: tuple
    # outer search
    n_starts: int = 3
    initial_mesh: float = 0.25
    min_mesh: float = 1.0 / 32
    max_evals: int = 150
    # top-down baseline
    baseline_period_points: int = 5
    baseline_reliability_floor: float = 0.5
    baseline_bisection_steps: int = 8
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.r0 < 1:
            raise ValueError(f"r0 must lie in [0, 1), got {self.r0}")
        if self.n_outer_samples < 1 or self.n_inner_samples < 1:
            raise ValueError("sample counts must be >= 1")
        names = CommParams.field_names()
        clean = {}
        for name in names:
            if name in self.z_bounds:
                lo, hi = (float(v) for v in self.z_bounds[name])
                if lo > hi:
                    raise ValueError(f"bounds for {name}: {lo} > {hi}")
                clean[name] = (lo, hi)
        unknown = set(self.z_bounds) - set(names)
        if unknown:
            raise ValueError(f"unknown z coordinates: {sorted(unknown)}")
        object.__setattr__(self, "z_bounds", clean)
        object.__setattr__(self, "candidate_grid", tuple(self.candidate_grid))
        if not self.candidate_grid:
            raise ValueError("candidate grid is empty")

    @property
    def free(self) -> tuple[str, ...]:
        return tuple(n for n, (lo, hi) in self.z_bounds.items() if hi > lo)

    def decode(self, u: Sequence[float]) -> CommParams:
        """Map a point of the unit cube over the free coordinates to ``z``."""
        vals = {}
        for name, (lo, hi) in self.z_bounds.items():
            vals[name] = lo
        for name, ui in zip(self.free, u):
            lo, hi = self.z_bounds[name]
            v = lo + float(np.clip(ui, 0.0, 1.0)) * (hi - lo)
            vals[name] = int(round(v)) if name in INTEGER_FIELDS else v
        return self.z0.replace(**vals)

    def encode(self, z: CommParams) -> np.ndarray:
        return np.array([(getattr(z, n) - self.z_bounds[n][0])
                         / (self.z_bounds[n][1] - self.z_bounds[n][0]) for n in self.free])

    def replace(self, **changes) -> "CodesignProblem":
        return dataclasses.replace(self, **changes)


@dataclass
class SaaEstimate:
    z: CommParams
    q1: float
    q1_ci: float
    q2: float
    q2_ci: float
    residuals: np.ndarray
    q1_per_scenario: list[float]
    chosen: list[int]
    specs: list[ControllerSpec]
    kpis: list[KpiVector] = field(repr=False)
    unstable_queue: bool = False

    @property
    def comm_feasible(self) -> bool:
        return not self.unstable_queue and bool(np.all(self.residuals <= 0))

    def meets(self, r0: float) -> bool:
        return self.q2 <= 1.0 - r0

    def feasible(self, r0: float) -> bool:
        return self.comm_feasible and self.meets(r0) and math.isfinite(self.q1)

    def violation(self, r0: float, budget: Budget) -> float:
        scale = [max(abs(budget.max_bandwidth_hz), 1.0), max(abs(budget.max_snr_db), 1.0),
                 max(abs(budget.min_coding_rate), 1e-3)]
        if budget.max_avg_power is not None:
            scale.append(max(abs(budget.max_avg_power), 1.0))
        v = float(np.sum(np.clip(self.residuals, 0.0, None) / np.array(scale)))
        v += max(self.q2 - (1.0 - r0), 0.0)
        if self.unstable_queue:
            v += 1.0
        return v


def _scenario_task(args):
    z, grid, template, scenario_seed, ep_seeds = args
    res = inner_evaluate(z, grid, template, scenario_seed, len(ep_seeds), ep_seeds)
    return res.q1, res.best_index, res.best_spec, res.kpis


def saa_objective(z: CommParams, problem: CodesignProblem, base_seed: int,
                  grid: Sequence | None = None, template: EpisodeConfig | None = None,
                  workers: int | None = None) -> SaaEstimate:
    """SAA estimates of ``E[Q1]`` and ``E[Q2]`` at ``z``.

    Scenario ``s`` uses seed ``(base_seed, 1, s)``; its episode ``e`` uses
    ``(base_seed, 2, s, e)``.
    """
    grid = problem.candidate_grid if grid is None else tuple(grid)
    template = problem.template if template is None else template
    workers = problem.workers if workers is None else workers
    residuals = feasibility_residual(z, problem.budget)
    tasks = [(z, grid, template, (base_seed, 1, s),
              [(base_seed, 2, s, e) for e in range(problem.n_inner_samples)])
             for s in range(problem.n_outer_samples)]
    try:
        results = parallel_map(_scenario_task, tasks, workers)
    except UnstableQueueError:
        return SaaEstimate(z, math.inf, math.inf, 1.0, 0.0, residuals, [], [], [], [],
                           unstable_queue=True)
    q1s = [r[0] for r in results]
    kpis = [k for r in results for k in r[3]]
    fails = [q2(k, problem.demand) for k in kpis]
    n = len(q1s)
    if all(math.isfinite(v) for v in q1s):
        q1 = math.fsum(q1s) / n
        q1_ci = 1.96 * float(np.std(q1s, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    else:
        q1 = q1_ci = math.inf
    est = _proportion(sum(fails), len(fails))
    return SaaEstimate(z, q1, q1_ci, est.point, est.ci_halfwidth, residuals, q1s,
                       [r[1] for r in results], [r[2] for r in results], kpis)


# -- pattern search ----------------------------------------------------------

@dataclass
class SearchResult:
    u: np.ndarray
    key: tuple
    evaluations: int
    final_mesh: float
    history: list = field(default_factory=list)


def pattern_search(key_fn: Callable[[np.ndarray], tuple], dim: int, starts: Sequence,
                   initial_mesh: float = 0.25, min_mesh: float = 1.0 / 32,
                   max_evals: int = 150, min_steps: Sequence[float] | None = None,
                   snap: Callable[[np.ndarray], np.ndarray] | None = None) -> SearchResult:
    """Multi-start compass search on the unit cube minimizing ``key_fn``.

    ``key_fn`` returns a sortable tuple; a poll point must compare strictly
    lower to be accepted. On an unsuccessful poll the mesh halves. ``snap``
    maps a point to its canonical representative (e.g. integer rounding) and
    ``min_steps`` sets a per-coordinate minimum poll step.
    """
    snap = snap or (lambda u: u)
    min_steps = np.zeros(dim) if min_steps is None else np.asarray(min_steps, dtype=float)
    cache: dict[tuple, tuple] = {}
    history = []

    def evaluate(u):
        u = snap(np.clip(u, 0.0, 1.0))
        k = tuple(np.round(u, 12))
        if k not in cache:
            cache[k] = key_fn(u)
            history.append((u.copy(), cache[k]))
        return u, cache[k]

    best_u, best_key, best_mesh = None, None, initial_mesh
    for start in starts:
        if len(cache) >= max_evals:
            break
        u, key = evaluate(np.asarray(start, dtype=float))
        mesh = initial_mesh
        while mesh >= min_mesh and len(cache) < max_evals:
            cand_u, cand_key = None, None
            for i in range(dim):
                for sign in (1.0, -1.0):
                    step = np.zeros(dim)
                    step[i] = sign * max(mesh, min_steps[i])
                    v, kv = evaluate(u + step)
                    if np.array_equal(v, u):
                        continue
                    if kv < key and (cand_key is None or kv < cand_key):
                        cand_u, cand_key = v, kv
            if cand_u is not None:
                u, key = cand_u, cand_key
            else:
                mesh /= 2.0
        if best_key is None or key < best_key:
            best_u, best_key, best_mesh = u, key, mesh
    return SearchResult(best_u, best_key, len(cache), best_mesh, history)


def _start_points(dim: int, n: int) -> list[np.ndarray]:
    pts = [np.full(dim, 0.5)]
    if n > 1 and dim > 0:
        halton = qmc.Halton(d=dim, scramble=False).random(n)
        # skip the origin, which the unscrambled sequence emits first
        pts.extend(halton[1:n])
    return pts[:max(n, 1)]


@dataclass
class DesignReport:
    method: str
    feasible: bool
    z_star: CommParams
    controller_star: ControllerSpec | None
    q1_estimate: float
    q1_ci: float
    q2_estimate: float
    q2_ci: float
    r0: float
    residuals: list[float]
    evaluations: int
    final_mesh: dict[str, float] = field(default_factory=dict)
    chosen_candidates: dict[str, int] = field(default_factory=dict)
    requirement: dict | None = None
    baseline: dict | None = None
    message: str = ""
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "method": self.method,
            "feasible": self.feasible,
            "z_star": dataclasses.asdict(self.z_star),
            "controller_star": None if self.controller_star is None else self.controller_star.to_dict(),
            "q1_estimate": self.q1_estimate,
            "q1_ci": self.q1_ci,
            "q2_estimate": self.q2_estimate,
            "q2_ci": self.q2_ci,
            "q2_limit": 1.0 - self.r0,
            "r0": self.r0,
            "residuals": list(self.residuals),
            "evaluations": self.evaluations,
            "final_mesh": dict(self.final_mesh),
            "chosen_candidates": dict(self.chosen_candidates),
            "requirement": self.requirement,
            "baseline": self.baseline,
            "message": self.message,
        }
        if include_timing:
            d["wall_time_s"] = self.wall_time_s
        return d


def _modal(est: SaaEstimate) -> tuple[ControllerSpec | None, dict[str, int]]:
    if not est.specs:
        return None, {}
    counts = collections.Counter(est.chosen)
    idx = min(counts, key=lambda i: (-counts[i], i))
    spec = est.specs[est.chosen.index(idx)]
    labels = {}
    for i, s in zip(est.chosen, est.specs):
        labels[s.label] = labels.get(s.label, 0) + 1
    return spec, dict(sorted(labels.items()))


def _report(method: str, est: SaaEstimate, problem: CodesignProblem, evaluations: int,
            **extra) -> DesignReport:
    spec, counts = _modal(est)
    return DesignReport(method, est.feasible(problem.r0), est.z, spec, est.q1, est.q1_ci,
                        est.q2, est.q2_ci, problem.r0, [float(v) for v in est.residuals],
                        evaluations, chosen_candidates=counts, **extra)


def _search_key(est: SaaEstimate, problem: CodesignProblem) -> tuple:
    if est.feasible(problem.r0):
        return (0, est.q1)
    return (1, est.violation(problem.r0, problem.budget), est.q1)


def _snapper(problem: CodesignProblem):
    def snap(u):
        return problem.encode(problem.decode(u)) if problem.free else u
    return snap


def _min_steps(problem: CodesignProblem) -> list[float]:
    steps = []
    for name in problem.free:
        lo, hi = problem.z_bounds[name]
        steps.append(1.0 / (hi - lo) if name in INTEGER_FIELDS else 0.0)
    return steps


def optimize(problem: CodesignProblem, base_seed: int, extra_starts: Sequence = ()) -> DesignReport:
    """Minimize ``E[Q1]`` subject to ``f(z) <= 0`` and ``E[Q2] <= 1 - r0``."""
    t_start = time.perf_counter()
    dim = len(problem.free)
    estimates: dict[tuple, SaaEstimate] = {}

    def key_fn(u):
        z = problem.decode(u)
        est = saa_objective(z, problem, base_seed)
        estimates[tuple(np.round(u, 12))] = est
        return _search_key(est, problem)

    starts = _start_points(dim, problem.n_starts)
    starts += [problem.encode(z) for z in extra_starts]
    if dim == 0:
        est = saa_objective(problem.decode([]), problem, base_seed)
        rep = _report("codesign", est, problem, 1)
        rep.wall_time_s = time.perf_counter() - t_start
        return rep
    res = pattern_search(key_fn, dim, starts, problem.initial_mesh, problem.min_mesh,
                         problem.max_evals, _min_steps(problem), _snapper(problem))
    best = estimates[tuple(np.round(res.u, 12))]
    mesh = {n: res.final_mesh * (problem.z_bounds[n][1] - problem.z_bounds[n][0])
            for n in problem.free}
    msg = "" if best.feasible(problem.r0) else "no feasible point found within the evaluation budget"
    rep = _report("codesign", best, problem, res.evaluations, final_mesh=mesh, message=msg)
    rep.wall_time_s = time.perf_counter() - t_start
    return rep


def _ideal_template(template: EpisodeConfig) -> EpisodeConfig:
    return template.replace(ul=Link(template.ul.params, template.ul.cell, ideal=True),
                            dl=Link(template.dl.params, template.dl.cell, ideal=True))


def comm_cost_proxy(z: CommParams) -> float:
    """Bandwidth times linear transmit power, the link-engineering cost."""
    return z.bandwidth_hz * 10.0 ** (z.snr_db / 10.0)


def topdown_baseline(problem: CodesignProblem, base_seed: int) -> DesignReport:
    """Sequential design: control first, then requirements, then the link."""
    t_start = time.perf_counter()
    evals = 0
    ideal = _ideal_template(problem.template)

    # stage 1: controller and sampling period under an ideal channel
    if "sampling_period_s" in problem.free:
        lo, hi = problem.z_bounds["sampling_period_s"]
        periods = list(np.linspace(lo, hi, problem.baseline_period_points))
    else:
        periods = [problem.decode(np.full(len(problem.free), 0.5)).sampling_period_s]
    best = None
    for period in periods:
        z = problem.decode(np.full(len(problem.free), 0.5)).replace(sampling_period_s=period)
        for idx, cand in enumerate(problem.candidate_grid):
            est = saa_objective(z, problem, base_seed, grid=[cand], template=ideal)
            evals += 1
            key = (not est.meets(problem.r0), est.q1)
            if best is None or key < best[0]:
                best = (key, period, cand, est)
    _, period, cand, ideal_est = best
    if not ideal_est.meets(problem.r0):
        rep = _report("topdown", ideal_est, problem, evals,
                      message="controller misses the demand set even over an ideal channel")
        rep.feasible = False
        rep.wall_time_s = time.perf_counter() - t_start
        return rep

    # stage 2: loosest abstract-link requirement the fixed controller tolerates
    z_mid = problem.decode(np.full(len(problem.free), 0.5)).replace(sampling_period_s=period)
    # UL + DL latency must fit inside the stale-command window
    lat_max = 0.5 * problem.template.with_comm(z_mid).stale_limit
    floor = problem.baseline_reliability_floor

    def requirement(s):
        return 1.0 - s * (1.0 - floor), s * lat_max

    def tolerated(s):
        rel, lat = requirement(s)
        params = z_mid.replace(max_retx=0)
        abstract = problem.template.replace(
            ul=Link(params, problem.template.ul.cell, per=1.0 - rel, fixed_delay_s=lat),
            dl=Link(params, problem.template.dl.cell, per=1.0 - rel, fixed_delay_s=lat))
        est = saa_objective(params, problem, base_seed, grid=[cand], template=abstract)
        return est.meets(problem.r0)

    lo_s, hi_s = 0.0, 1.0
    if tolerated(1.0):
        lo_s = 1.0
        evals += 1
    else:
        evals += 1
        for _ in range(problem.baseline_bisection_steps):
            mid = 0.5 * (lo_s + hi_s)
            evals += 1
            if tolerated(mid):
                lo_s = mid
            else:
                hi_s = mid
    rel_req, lat_req = requirement(lo_s)
    req = {"link_reliability": rel_req, "link_latency_s": lat_req, "scalarization": lo_s,
           "sampling_period_s": period, "controller": cand.label if hasattr(cand, "label") else ""}

    # stage 3: cheapest link meeting the requirement
    stage3 = problem.replace(z_bounds={**problem.z_bounds,
                                       "sampling_period_s": (period, period)})

    def link_key(u):
        z = stage3.decode(u)
        res = feasibility_residual(z, problem.budget)
        try:
            lat = nominal_latency(z, problem.template.ul.cell)
        except UnstableQueueError:
            return (1, math.inf, 0.0)
        short = (max(rel_req - link_reliability(z), 0.0) + max(lat - lat_req, 0.0) / lat_max
                 + float(np.sum(np.clip(res, 0.0, None))))
        if short > 0:
            return (1, short, 0.0)
        return (0, comm_cost_proxy(z), 0.0)

    dim = len(stage3.free)
    if dim:
        res = pattern_search(link_key, dim, _start_points(dim, 8), 0.25, 1.0 / 256, 2000,
                             _min_steps(stage3), _snapper(stage3))
        z_link = stage3.decode(res.u)
        link_ok = res.key[0] == 0
    else:
        z_link = stage3.decode([])
        link_ok = link_key([])[0] == 0
    est = saa_objective(z_link, problem, base_seed, grid=[cand])
    evals += 1
    msg = "" if link_ok else "no link configuration meets the derived requirement"
    rep = _report("topdown", est, problem, evals, requirement=req, message=msg)
    rep.feasible = rep.feasible and link_ok
    rep.wall_time_s = time.perf_counter() - t_start
    # keep the recipe so the report can be re-evaluated on the same grid
    rep.requirement["candidate_index"] = problem.candidate_grid.index(cand)
    return rep


def compare_reports(codesign: DesignReport, baseline: DesignReport) -> dict:
    """Joint comparison of the two designs' objectives."""
    ci = math.hypot(codesign.q1_ci, baseline.q1_ci)
    return {
        "codesign_q1": codesign.q1_estimate,
        "baseline_q1": baseline.q1_estimate,
        "delta_q1": codesign.q1_estimate - baseline.q1_estimate,
        "combined_ci": ci,
        "codesign_q2": codesign.q2_estimate,
        "baseline_q2": baseline.q2_estimate,
        "codesign_feasible": codesign.feasible,
        "baseline_feasible": baseline.feasible,
    }


def pareto_flags(values: np.ndarray) -> list[bool]:
    """Non-dominated rows when every column is minimized."""
    values = np.asarray(values, dtype=float)
    flags = []
    for i in range(len(values)):
        dominated = False
        for j in range(len(values)):
            if i != j and np.all(values[j] <= values[i]) and np.any(values[j] < values[i]):
                dominated = True
                break
        flags.append(not dominated)
    return flags


PARETO_KPIS = ("control_cost", "e2e_latency_q999", "packet_loss_rate_ul", "mean_aoi")


def feasibility_region_sweep(z_grid: Sequence[CommParams], problem: CodesignProblem,
                             base_seed: int, pareto_kpis: Sequence[str] = PARETO_KPIS) -> list[dict]:
    """KPI image of a set of designs, with Pareto flags over ``pareto_kpis``."""
    if not z_grid:
        raise ValueError("sweep grid is empty")
    rows = []
    for z in z_grid:
        est = saa_objective(z, problem, base_seed)
        row = {"z": dataclasses.asdict(z), "q1": est.q1, "q2": est.q2,
               "feasible": est.feasible(problem.r0)}
        if est.kpis:
            agg = aggregate(est.kpis)
            row["kpi"] = {name: agg[name]["mean"] for name in KPI_NAMES}
        else:
            row["kpi"] = {name: math.inf for name in KPI_NAMES}
        rows.append(row)
    matrix = [[r["kpi"][k] for k in pareto_kpis] for r in rows]
    for r, flag in zip(rows, pareto_flags(matrix)):
        r["pareto"] = flag
    return rows
