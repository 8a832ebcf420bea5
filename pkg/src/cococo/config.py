"""Experiment configuration: strict schema, YAML/JSON loading and object builders.

A config file has the sections ``plant``, ``ul``, ``dl``, ``cell``, ``episode``,
``controller_grid``, ``demand_set``, ``problem``, ``sweep``, ``sla`` and
``run``. Unknown keys anywhere are rejected. A ``manifest.json`` written by a
previous run is accepted in place of a config file; its ``config`` block is
the fully resolved config of that run.
"""

from __future__ import annotations

import copy
import itertools
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .codesign import CodesignProblem
from .comm_channel import Budget, CellLoad, CommParams, Link
from .controller import CandidateRecipe, Estimator, LossPolicy
from .dependability import DemandSet
from .plant import PlantModel, discretize, double_integrator, inverted_pendulum
from .sim_engine import KPI_NAMES, EpisodeConfig, X0Sampler

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "apply_overrides",
           "build_plant", "build_template", "build_grid", "build_problem", "sweep_points"]


class ConfigError(ValueError):
    """Config could not be read or failed validation; message names the field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlantSection(_Strict):
    kind: Literal["double_integrator", "inverted_pendulum", "custom"] = "double_integrator"
    dt: float = Field(0.002, gt=0)
    disturbance_std: float = Field(0.0, ge=0)
    noise_std: float = Field(0.0, ge=0)
    length: float = Field(0.5, gt=0)
    # custom plants: continuous-time A, B (row-major nested lists)
    A: Optional[list[list[float]]] = None
    B: Optional[list[list[float]]] = None
    C: Optional[list[list[float]]] = None
    disturbance_cov: Optional[list[list[float]]] = None
    measurement_noise_cov: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _custom_needs_matrices(self):
        if self.kind == "custom" and (self.A is None or self.B is None):
            raise ValueError("custom plant needs A and B")
        return self


class LinkSection(_Strict):
    snr_db: float = 10.0
    bandwidth_hz: float = Field(1e6, gt=0)
    coding_rate: float = Field(0.5, ge=0, le=1)
    max_retx: int = Field(0, ge=0)
    payload_bits: float = Field(256.0, gt=0)
    proc_delay_s: float = Field(1e-4, ge=0)
    queue_rate: float = Field(1e4, gt=0)
    sampling_period_s: float = Field(0.02, gt=0)
    # test-mode overrides
    per: Optional[float] = Field(None, ge=0, le=1)
    fixed_delay_s: Optional[float] = Field(None, ge=0)
    ideal: bool = False

    def params(self) -> CommParams:
        return CommParams(**self.model_dump(exclude={"per", "fixed_delay_s", "ideal"}))


class CellSection(_Strict):
    pool_bandwidth_hz: float = Field(20e6, gt=0)
    utilization: float = Field(0.5, ge=0)
    reference_payload_bits: float = Field(256.0, gt=0)


class X0Section(_Strict):
    kind: Literal["fixed", "gaussian"] = "fixed"
    mean: list[float] = [1.0, 0.0]
    std: list[float] = [0.0, 0.0]
    attach_delay: bool = False


class EpisodeSection(_Strict):
    horizon_s: float = Field(2.0, gt=0)
    x0: X0Section = X0Section()
    aoii_threshold: float = Field(0.05, gt=0)
    stale_after_s: Optional[float] = Field(None, gt=0)


class GridSection(_Strict):
    Q: list[list[float]] = [[1.0, 0.0], [0.0, 1.0]]
    R: list[list[float]] = [[0.1]]
    r_scales: list[float] = [1.0]
    delays_s: list[float] = [0.0]
    policies: list[LossPolicy] = [LossPolicy.HOLD_LAST]
    estimators: list[Estimator] = [Estimator.LATEST_SAMPLE, Estimator.MODEL_PREDICT]

    @model_validator(mode="after")
    def _non_empty(self):
        for name in ("r_scales", "delays_s", "policies", "estimators"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        return self


class DemandSection(_Strict):
    bounds: dict[str, tuple[Optional[float], Optional[float]]] = {}
    fail_on_diverged: bool = True

    @model_validator(mode="after")
    def _known_kpis(self):
        unknown = set(self.bounds) - set(KPI_NAMES)
        if unknown:
            raise ValueError(f"unknown KPI names {sorted(unknown)}")
        return self


class BudgetSection(_Strict):
    max_bandwidth_hz: float = 20e6
    max_snr_db: float = 30.0
    min_coding_rate: float = 0.1
    max_avg_power: Optional[float] = None


class ProblemSection(_Strict):
    bounds: dict[str, tuple[float, float]] = {"snr_db": (-2.0, 15.0), "max_retx": (0, 3)}
    budget: BudgetSection = BudgetSection()
    r0: float = Field(0.9, ge=0, lt=1)
    n_outer_samples: int = Field(20, ge=1)
    n_inner_samples: int = Field(20, ge=1)
    n_starts: int = Field(3, ge=1)
    initial_mesh: float = Field(0.25, gt=0, le=1)
    min_mesh: float = Field(1.0 / 32, gt=0)
    max_evals: int = Field(150, ge=1)
    baseline_period_points: int = Field(5, ge=1)
    baseline_reliability_floor: float = Field(0.5, ge=0, lt=1)
    baseline_bisection_steps: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _known_fields(self):
        unknown = set(self.bounds) - set(CommParams.field_names())
        if unknown:
            raise ValueError(f"unknown z coordinates {sorted(unknown)}")
        return self


class SweepSection(_Strict):
    # cartesian product of the listed values; unlisted fields stay at the ul values
    grid: dict[str, list[float]] = {"max_retx": [0, 1, 2]}
    pareto_kpis: list[str] = ["control_cost", "e2e_latency_q999",
                              "packet_loss_rate_ul", "mean_aoi"]


class SlaSection(_Strict):
    targets: list[float] = [0.9]
    axis: Literal["link_reliability"] = "link_reliability"


class RunSection(_Strict):
    seed: int = Field(0, ge=0)
    out: str = "out"
    workers: int = Field(1, ge=1)
    n_episodes: int = Field(1, ge=1)
    candidate: int = Field(0, ge=0)


class ExperimentConfig(_Strict):
    plant: PlantSection
    ul: LinkSection = LinkSection()
    dl: LinkSection = LinkSection()
    cell: CellSection = CellSection()
    episode: EpisodeSection = EpisodeSection()
    controller_grid: GridSection = GridSection()
    demand_set: DemandSection = DemandSection()
    problem: ProblemSection = ProblemSection()
    sweep: SweepSection = SweepSection()
    sla: SlaSection = SlaSection()
    run: RunSection = RunSection()

    def resolved(self) -> dict:
        """Fully resolved config as plain JSON data (defaults filled in)."""
        return json.loads(self.model_dump_json())


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars/lists."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    return doc


def load_config(path, overrides=(), seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "manifest_version" in doc and "config" in doc:
        doc = doc["config"]
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        _set_path(doc, "run.seed", int(seed))
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc


# -- builders ----------------------------------------------------------------

def build_plant(sec: PlantSection) -> PlantModel:
    if sec.kind == "double_integrator":
        return double_integrator(sec.dt, sec.disturbance_std, sec.noise_std)
    if sec.kind == "inverted_pendulum":
        return inverted_pendulum(sec.dt, sec.length, disturbance_std=sec.disturbance_std,
                                 noise_std=sec.noise_std)
    n = len(sec.A)
    W = sec.disturbance_cov
    if W is None:
        W = (np.eye(n) * sec.disturbance_std**2 * sec.dt).tolist()
    V = sec.measurement_noise_cov
    if V is None:
        n_y = n if sec.C is None else len(sec.C)
        V = (np.eye(n_y) * sec.noise_std**2).tolist()
    return discretize(sec.A, sec.B, sec.dt, C=sec.C, disturbance_cov=W, measurement_noise_cov=V)


def _link(sec: LinkSection, cell: CellLoad) -> Link:
    return Link(sec.params(), cell, per=sec.per, fixed_delay_s=sec.fixed_delay_s, ideal=sec.ideal)


def build_template(cfg: ExperimentConfig, plant: PlantModel | None = None) -> EpisodeConfig:
    plant = build_plant(cfg.plant) if plant is None else plant
    cell = CellLoad(**cfg.cell.model_dump())
    x0 = X0Sampler(cfg.episode.x0.kind, tuple(cfg.episode.x0.mean),
                   tuple(cfg.episode.x0.std), cfg.episode.x0.attach_delay)
    return EpisodeConfig(plant, _link(cfg.ul, cell), _link(cfg.dl, cell), None,
                         cfg.episode.horizon_s, x0, aoii_threshold=cfg.episode.aoii_threshold,
                         stale_after_s=cfg.episode.stale_after_s)


def build_grid(sec: GridSection) -> list[CandidateRecipe]:
    return [CandidateRecipe(sec.Q, sec.R, r, d, pol, est)
            for r, d, pol, est in itertools.product(sec.r_scales, sec.delays_s,
                                                    sec.policies, sec.estimators)]


def build_demand(sec: DemandSection) -> DemandSet:
    return DemandSet(dict(sec.bounds), sec.fail_on_diverged)


def build_problem(cfg: ExperimentConfig, workers: int | None = None) -> CodesignProblem:
    p = cfg.problem
    return CodesignProblem(
        build_template(cfg), cfg.ul.params(), dict(p.bounds), Budget(**p.budget.model_dump()),
        build_demand(cfg.demand_set), p.r0, p.n_outer_samples, p.n_inner_samples,
        build_grid(cfg.controller_grid), n_starts=p.n_starts, initial_mesh=p.initial_mesh,
        min_mesh=p.min_mesh, max_evals=p.max_evals,
        baseline_period_points=p.baseline_period_points,
        baseline_reliability_floor=p.baseline_reliability_floor,
        baseline_bisection_steps=p.baseline_bisection_steps,
        workers=cfg.run.workers if workers is None else workers)


def sweep_points(cfg: ExperimentConfig) -> list[CommParams]:
    base = cfg.ul.params()
    names = list(cfg.sweep.grid)
    unknown = set(names) - set(CommParams.field_names())
    if unknown:
        raise ConfigError(f"sweep.grid: unknown z coordinates {sorted(unknown)}")
    if any(not cfg.sweep.grid[n] for n in names):
        raise ConfigError("sweep.grid: every listed coordinate needs at least one value")
    return [base.replace(**dict(zip(names, combo)))
            for combo in itertools.product(*(cfg.sweep.grid[n] for n in names))]
