"""LQR design under ideal communication, actuation policies and the inner stage.

The inner stage searches a finite grid of controller candidates for the one
with the lowest expected quadratic cost given a communication design ``z`` and
a fixed channel scenario.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .plant import PlantModel

__all__ = [
    "LossPolicy",
    "Estimator",
    "LqrDesignError",
    "ControllerSpec",
    "ControlCost",
    "CandidateRecipe",
    "InnerResult",
    "COST_OVERFLOW",
    "design_lqr",
    "riccati_residual",
    "compute_command",
    "apply_actuation",
    "accumulate_cost",
    "instantiate",
    "default_candidate_grid",
    "inner_evaluate",
]

COST_OVERFLOW = 1e12


class LossPolicy(str, enum.Enum):
    HOLD_LAST = "HoldLast"
    ZERO_INPUT = "ZeroInput"


class Estimator(str, enum.Enum):
    LATEST_SAMPLE = "LatestSample"
    MODEL_PREDICT = "ModelPredict"


class LqrDesignError(RuntimeError):
    """The Riccati recursion failed to converge (pair not stabilizable)."""


def _frozen(m) -> np.ndarray:
    arr = np.atleast_2d(np.array(m, dtype=float))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    gain: np.ndarray
    Q_weight: np.ndarray
    R_weight: np.ndarray
    loss_policy: LossPolicy = LossPolicy.HOLD_LAST
    estimator: Estimator = Estimator.LATEST_SAMPLE
    label: str = "lqr"
    riccati: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "gain", _frozen(self.gain))
        object.__setattr__(self, "Q_weight", _frozen(self.Q_weight))
        object.__setattr__(self, "R_weight", _frozen(self.R_weight))
        object.__setattr__(self, "loss_policy", LossPolicy(self.loss_policy))
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        Q, R = self.Q_weight, self.R_weight
        if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q_weight must be symmetric positive semi-definite")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R_weight must be symmetric positive definite")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "gain": self.gain.tolist(),
            "Q_weight": self.Q_weight.tolist(),
            "R_weight": self.R_weight.tolist(),
            "loss_policy": self.loss_policy.value,
            "estimator": self.estimator.value,
        }


@dataclass
class ControlCost:
    j_value: float = 0.0


def riccati_residual(P, A, B, Q, R) -> float:
    """Max-abs residual of the discrete algebraic Riccati equation at ``P``."""
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(rhs - P)))


def design_lqr(plant: PlantModel, Q_weight, R_weight, horizon: int | None = None,
               tol: float = 1e-13, max_iter: int = 1_000_000,
               loss_policy=LossPolicy.HOLD_LAST, estimator=Estimator.LATEST_SAMPLE,
               label: str = "lqr") -> ControllerSpec:
    """Discrete LQR gain from the backward Riccati recursion.

    With ``horizon=None`` the recursion is iterated to its fixed point;
    otherwise it runs exactly ``horizon`` steps from ``P = Q`` and returns the
    first-stage gain. Control law is ``u = -K x``.
    """
    A, B = plant.A, plant.B
    Q = np.atleast_2d(np.asarray(Q_weight, dtype=float))
    R = np.atleast_2d(np.asarray(R_weight, dtype=float))
    if Q.shape != A.shape or R.shape != (B.shape[1], B.shape[1]):
        raise ValueError("weight shapes do not match the plant")
    P = Q.copy()
    steps = max_iter if horizon is None else int(horizon)
    converged = horizon is not None
    for _ in range(steps):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.abs(P_next).max() > 1e15:
            raise LqrDesignError("Riccati recursion diverged; (A, B) is not stabilizable")
        delta = np.abs(P_next - P).max()
        P = P_next
        if horizon is None and delta <= tol * (1.0 + np.abs(P).max()):
            converged = True
            break
    if not converged:
        raise LqrDesignError(f"Riccati recursion did not converge in {max_iter} iterations")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    if horizon is None:
        rho = np.abs(np.linalg.eigvals(A - B @ K)).max()
        if rho >= 1.0:
            raise LqrDesignError(f"closed loop not Schur stable (spectral radius {rho:.6f})")
    return ControllerSpec(K, Q, R, loss_policy, estimator, label, riccati=P)


def predict(plant: PlantModel, x, steps: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    for _ in range(steps):
        x = plant.A @ x
    return x


def compute_command(spec: ControllerSpec, latest_sample, sample_age_s: float,
                    plant: PlantModel) -> np.ndarray:
    """``u = -K x_hat``; zero input before the first sample arrives."""
    if latest_sample is None:
        return np.zeros(spec.gain.shape[0])
    x_hat = np.asarray(latest_sample, dtype=float)
    if spec.estimator is Estimator.MODEL_PREDICT:
        x_hat = predict(plant, x_hat, age_steps(sample_age_s, plant.dt))
    return -spec.gain @ x_hat


def age_steps(age_s: float, dt: float) -> int:
    return int(math.floor(age_s / dt + 1e-9))


def apply_actuation(spec: ControllerSpec, last_applied_u, delivered, new_command) -> np.ndarray:
    """Input the actuator holds after an actuation instant.

    ``delivered`` may be a bool or a :class:`~cococo.comm_channel.DeliveryOutcome`.
    """
    ok = delivered.delivered if hasattr(delivered, "delivered") else bool(delivered)
    if ok:
        return np.asarray(new_command, dtype=float)
    if spec.loss_policy is LossPolicy.HOLD_LAST:
        return np.asarray(last_applied_u, dtype=float)
    return np.zeros(spec.gain.shape[0])


def accumulate_cost(cost: ControlCost, x, u, Q_weight, R_weight, dt: float) -> ControlCost:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    cost.j_value += float(x @ np.asarray(Q_weight) @ x + u @ np.asarray(R_weight) @ u) * dt
    return cost


@dataclass(frozen=True)
class CandidateRecipe:
    """A controller candidate described independently of the sampling period.

    The gain is the LQR gain of the plant sampled at the control period with
    weights ``Q`` and ``r_scale * R`` (both scaled by the period). A positive
    ``compensate_delay_s`` folds a zero-input prediction over that nominal
    loop delay into the gain.
    """

    Q_weight: tuple
    R_weight: tuple
    r_scale: float = 1.0
    compensate_delay_s: float = 0.0
    loss_policy: LossPolicy = LossPolicy.HOLD_LAST
    estimator: Estimator = Estimator.LATEST_SAMPLE
    label: str = ""

    def __post_init__(self):
        to_tuple = lambda m: tuple(tuple(float(v) for v in row)
                                   for row in np.atleast_2d(np.asarray(m, dtype=float)))
        object.__setattr__(self, "Q_weight", to_tuple(self.Q_weight))
        object.__setattr__(self, "R_weight", to_tuple(self.R_weight))
        object.__setattr__(self, "loss_policy", LossPolicy(self.loss_policy))
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        if not self.label:
            object.__setattr__(
                self, "label",
                f"r{self.r_scale:g}-d{self.compensate_delay_s:g}-"
                f"{self.loss_policy.value}-{self.estimator.value}")


def instantiate(recipe: CandidateRecipe, plant: PlantModel, period_s: float) -> ControllerSpec:
    return _instantiate_cached(recipe, plant, round(period_s, 12))


@lru_cache(maxsize=512)
def _instantiate_cached(recipe, plant, period_s):
    Q = np.array(recipe.Q_weight)
    R = np.array(recipe.R_weight) * recipe.r_scale
    sampled = plant if math.isclose(period_s, plant.dt) else plant.resample(period_s)
    spec = design_lqr(sampled, Q * period_s, R * period_s,
                      loss_policy=recipe.loss_policy, estimator=recipe.estimator,
                      label=recipe.label)
    gain = spec.gain
    if recipe.compensate_delay_s > 0:
        gain = gain @ plant.resample(recipe.compensate_delay_s).A
    # cost weights are per unit time; keep the unscaled ones on the spec
    return ControllerSpec(gain, np.array(recipe.Q_weight), np.array(recipe.R_weight),
                          recipe.loss_policy, recipe.estimator, recipe.label,
                          riccati=spec.riccati)


def default_candidate_grid(Q_weight, R_weight, r_scales=(1.0, 4.0),
                           delays=(0.0,), policies=tuple(LossPolicy),
                           estimators=tuple(Estimator)) -> list[CandidateRecipe]:
    return [CandidateRecipe(Q_weight, R_weight, r, d, pol, est)
            for r in r_scales for d in delays for pol in policies for est in estimators]


@dataclass
class InnerResult:
    best_index: int
    best_spec: ControllerSpec
    q1: float
    q1_stderr: float
    candidate_means: list[float]
    kpis: list  # KpiVector per episode of the chosen candidate
    diverged: bool = False


def inner_evaluate(z, controller_grid, template, scenario_seed, n_inner: int,
                   episode_seeds=None) -> InnerResult:
    """Inner stage: pick the candidate with the lowest mean cost for one scenario.

    ``template`` is an :class:`~cococo.sim_engine.EpisodeConfig` whose links
    receive ``z``. All candidates see the same channel realization and the
    same disturbance draws. Candidates with any diverged episode score
    ``inf``; ties go to the lowest index.
    """
    from .sim_engine import run_scenario

    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    cfg = template.with_comm(z)
    period = cfg.effective_sampling_period
    specs = [c if isinstance(c, ControllerSpec) else instantiate(c, cfg.plant, period)
             for c in controller_grid]
    if episode_seeds is None:
        episode_seeds = [tuple(np.atleast_1d(scenario_seed)) + (e,) for e in range(n_inner)]
    grid = run_scenario(cfg, specs, scenario_seed, episode_seeds)
    means = []
    for row in grid:
        costs = [k.control_cost for k in row]
        means.append(math.inf if any(k.diverged for k in row) else float(np.mean(costs)))
    best = int(np.argmin(means))  # first minimum
    if not math.isfinite(means[best]):
        return InnerResult(best, specs[best], math.inf, math.inf, means, grid[best], True)
    costs = np.array([k.control_cost for k in grid[best]])
    se = float(costs.std(ddof=1) / math.sqrt(len(costs))) if len(costs) > 1 else 0.0
    return InnerResult(best, specs[best], means[best], se, means, grid[best])
