"""Discrete-event simulation of the sensor -> UL -> controller -> DL -> actuator loop.

An episode is split in two passes:

1. :func:`build_schedule` draws every channel outcome from the scenario stream
   and resolves the event timeline (sample deliveries, command arrivals, stale
   and out-of-order discards, control instants). None of this depends on the
   plant state.
2. The plant is stepped at resolution ``dt`` for a batch of rows sharing that
   timeline. A row is one (controller, disturbance realization) pair.

Batch arithmetic is written as fixed-order elementwise sums rather than BLAS
products, so every row evolves bit-identically whatever the batch size. This is
what makes per-episode results independent of batching and worker layout.

Seed scheme: a seed is a tuple of non-negative ints. Independent streams are
derived as ``SeedSequence(seed + (tag,))`` with tags 0 = uplink, 1 = downlink,
2 = initial condition (all from the scenario seed), 3 = plant disturbance and
sensor noise (from the disturbance seed). :func:`monte_carlo` gives episode
``e`` the scenario seed ``(base, 1, e)`` and disturbance seed ``(base, 2, e)``.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aoi import AoiTracker
from .comm_channel import CommParams, DeliveryOutcome, Link
from .controller import COST_OVERFLOW, ControllerSpec, Estimator, LossPolicy
from .plant import PlantModel, PlantState

__all__ = [
    "X0Sampler",
    "EpisodeConfig",
    "KpiVector",
    "KPI_NAMES",
    "Schedule",
    "EpisodeTrace",
    "MonteCarloResult",
    "stream",
    "quantile_type7",
    "sample_initial_condition",
    "build_schedule",
    "run_episode",
    "run_scenario",
    "monte_carlo",
]

UL_TAG, DL_TAG, X0_TAG, NOISE_TAG = 0, 1, 2, 3
LATENCY_LEVELS = (0.5, 0.9, 0.999)


def _seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def stream(seed, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_seed_tuple(seed) + (tag,)))


def quantile_type7(values, q: float) -> float:
    """Linear-interpolation quantile (Hyndman-Fan type 7) tolerating ``inf``."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        return math.nan
    h = (x.size - 1) * q
    lo = int(math.floor(h))
    frac = h - lo
    if frac == 0.0 or lo + 1 >= x.size:
        return float(x[lo])
    a, b = x[lo], x[lo + 1]
    if math.isinf(b):
        return math.inf
    return float(a + frac * (b - a))


@dataclass(frozen=True)
class X0Sampler:
    """Initial-condition distribution.

    ``fixed`` returns ``mean``; ``gaussian`` adds independent N(0, std^2) draws.
    With ``attach_delay`` the episode clock starts at the link processing delay,
    modelling network attachment (the only place ``z`` enters here).
    """

    kind: str = "fixed"
    mean: tuple = (1.0, 0.0)
    std: tuple = (0.0, 0.0)
    attach_delay: bool = False

    def __post_init__(self):
        if self.kind not in ("fixed", "gaussian"):
            raise ValueError(f"unknown x0 sampler kind {self.kind!r}")
        mean = tuple(float(v) for v in np.atleast_1d(self.mean))
        std = np.broadcast_to(np.asarray(self.std, dtype=float), (len(mean),))
        if np.any(std < 0):
            raise ValueError("x0 std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", tuple(float(v) for v in std))


def sample_initial_condition(sampler: X0Sampler, z: CommParams | None,
                             rng: np.random.Generator) -> PlantState:
    x = np.array(sampler.mean, dtype=float)
    if sampler.kind == "gaussian":
        x = x + np.array(sampler.std) * rng.standard_normal(x.size)
    t0 = z.proc_delay_s if (sampler.attach_delay and z is not None) else 0.0
    return PlantState(x, t0)


@dataclass(frozen=True)
class EpisodeConfig:
    plant: PlantModel
    ul: Link
    dl: Link
    controller: ControllerSpec | None
    horizon_s: float
    x0_sampler: X0Sampler = X0Sampler()
    scenario_seed: tuple = (0,)
    disturbance_seed: tuple = (0,)
    # threshold on |estimate - state|_inf above which the controller's view is incorrect
    aoii_threshold: float = 0.05
    # commands whose information is older than this on arrival are discarded;
    # None means one sampling period
    stale_after_s: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenario_seed", _seed_tuple(self.scenario_seed))
        object.__setattr__(self, "disturbance_seed", _seed_tuple(self.disturbance_seed))
        if self.horizon_s < 10 * self.effective_sampling_period - 1e-12:
            raise ValueError(
                f"horizon {self.horizon_s} s shorter than 10 sampling periods "
                f"({self.effective_sampling_period} s)")
        if len(self.x0_sampler.mean) != self.plant.n_x:
            raise ValueError("x0 sampler dimension does not match the plant")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.plant.dt))

    @property
    def sample_every(self) -> int:
        return max(1, int(round(self.ul.params.sampling_period_s / self.plant.dt)))

    @property
    def effective_sampling_period(self) -> float:
        return self.sample_every * self.plant.dt

    @property
    def stale_limit(self) -> float:
        return self.effective_sampling_period if self.stale_after_s is None else self.stale_after_s

    def with_comm(self, z: CommParams) -> "EpisodeConfig":
        return dataclasses.replace(self, ul=dataclasses.replace(self.ul, params=z),
                                   dl=dataclasses.replace(self.dl, params=z))

    def replace(self, **changes) -> "EpisodeConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class KpiVector:
    terminal_state_error: float
    rms_state_error: float
    control_cost: float
    e2e_latency_mean: float   # over applied commands; inf if none took effect
    e2e_latency_q50: float
    e2e_latency_q90: float
    e2e_latency_q999: float
    packet_loss_rate_ul: float
    packet_loss_rate_dl: float
    mean_aoi: float
    peak_aoi_max: float
    peak_aoi_mean: float
    aoi_variance: float
    mean_aoii: float
    diverged: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


KPI_NAMES = tuple(f.name for f in dataclasses.fields(KpiVector))


@dataclass
class Schedule:
    """State-independent event timeline of one episode."""

    dt: float
    t0: float
    n_steps: int
    sample_every: int
    n_samples: int
    ul: list[DeliveryOutcome]
    dl: list[DeliveryOutcome | None]
    ul_arrival: np.ndarray          # nan if lost
    cmd_age_steps: np.ndarray       # estimator propagation steps, -1 if no command
    apply_step: np.ndarray          # step at which the command takes effect, -1 if never
    e2e_latency: np.ndarray         # inf unless the command took effect
    step_apply: np.ndarray          # sample index whose command becomes active, -1 if none
    step_zero: np.ndarray           # control instant with no fresh command in the last period
    step_ctrl_sample: np.ndarray    # freshest sample at the controller at step start, -1 if none
    aoi_step_area: np.ndarray
    aoi: AoiTracker = field(repr=False)

    @property
    def ul_loss_rate(self) -> float:
        lost = sum(not o.delivered for o in self.ul)
        return lost / len(self.ul) if self.ul else 0.0

    @property
    def dl_loss_rate(self) -> float:
        sent = [o for o in self.dl if o is not None]
        return sum(not o.delivered for o in sent) / len(sent) if sent else 0.0

    def step_time(self, k: int) -> float:
        return self.t0 + k * self.dt


def build_schedule(cfg: EpisodeConfig, t0: float = 0.0) -> Schedule:
    dt = cfg.plant.dt
    n_steps, every = cfg.n_steps, cfg.sample_every
    n_samples = n_steps // every
    ul_rng = stream(cfg.scenario_seed, UL_TAG)
    dl_rng = stream(cfg.scenario_seed, DL_TAG)
    eps = 1e-9 * dt

    ul_out, dl_out = [], []
    ul_arrival = np.full(n_samples, np.nan)
    cmd_age = np.full(n_samples, -1, dtype=int)
    arrival_dl = np.full(n_samples, np.nan)
    e2e = np.full(n_samples, np.inf)
    for i in range(n_samples):
        gen = t0 + i * every * dt
        up = cfg.ul.transmit(ul_rng)
        ul_out.append(up)
        if not up.delivered:
            dl_out.append(None)
            continue
        ul_arrival[i] = gen + up.total_delay_s
        cmd_age[i] = int(math.floor(up.total_delay_s / dt + 1e-9))
        down = cfg.dl.transmit(dl_rng)
        dl_out.append(down)
        if down.delivered:
            arrival_dl[i] = ul_arrival[i] + down.total_delay_s

    # actuator: commands take effect at the first step boundary at or after arrival
    apply_step = np.full(n_samples, -1, dtype=int)
    pending = []
    for i in range(n_samples):
        if math.isnan(arrival_dl[i]):
            continue
        gen = t0 + i * every * dt
        if arrival_dl[i] - gen > cfg.stale_limit + eps:
            continue
        k = int(math.ceil((arrival_dl[i] - t0) / dt - 1e-9))
        if k < n_steps:
            pending.append((k, arrival_dl[i], i))
    pending.sort()
    step_apply = np.full(n_steps, -1, dtype=int)
    last = -1
    for k, arr, i in pending:
        if i > last:
            step_apply[k] = i
            apply_step[i] = k
            e2e[i] = arr - (t0 + i * every * dt)
            last = i
    # a newer command in the same step supersedes an earlier-arriving one
    for i in range(n_samples):
        k = apply_step[i]
        if k >= 0 and step_apply[k] != i:
            apply_step[i] = -1
            e2e[i] = np.inf

    applied = (step_apply >= 0).astype(int)
    csum = np.concatenate([[0], np.cumsum(applied)])
    step_zero = np.zeros(n_steps, dtype=bool)
    for k in range(every, n_steps, every):
        step_zero[k] = csum[k] - csum[k - every] == 0

    # controller-side age of information
    deliveries = sorted((ul_arrival[i], i) for i in range(n_samples)
                        if not math.isnan(ul_arrival[i]))
    tracker = AoiTracker.start(t0)
    area = np.zeros(n_steps)
    step_ctrl = np.full(n_steps, -1, dtype=int)
    freshest = -1
    d = 0
    for k in range(n_steps):
        t_k = t0 + k * dt
        t_next = t0 + (k + 1) * dt
        # deliveries at the step start are visible to the controller at t_k
        while d < len(deliveries) and deliveries[d][0] <= t_k + eps:
            i = deliveries[d][1]
            tracker.on_delivery(t0 + i * every * dt)
            freshest = max(freshest, i)
            d += 1
        step_ctrl[k] = freshest
        before = tracker.area_accum
        while d < len(deliveries) and deliveries[d][0] < t_next - eps:
            arr, i = deliveries[d]
            if arr > tracker.current_time:
                tracker.advance(arr - tracker.current_time)
            tracker.on_delivery(t0 + i * every * dt)
            freshest = max(freshest, i)
            d += 1
        tracker.advance(t_next - tracker.current_time)
        area[k] = tracker.area_accum - before
    # exact horizon bookkeeping for the summary
    tracker.elapsed = n_steps * dt

    return Schedule(dt, t0, n_steps, every, n_samples, ul_out, dl_out, ul_arrival,
                    cmd_age, apply_step, e2e, step_apply, step_zero, step_ctrl, area, tracker)


# -- fixed-order elementwise linear algebra over batch rows ------------------

def _mv(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Rows of ``X @ M.T`` summed in a fixed order."""
    out = X[:, 0:1] * M[:, 0]
    for j in range(1, M.shape[1]):
        out = out + X[:, j:j + 1] * M[:, j]
    return out


def _rowmv(K: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-row ``K[r] @ X[r]`` for ``K`` of shape (rows, n, m)."""
    out = X[:, 0:1] * K[:, :, 0]
    for j in range(1, K.shape[2]):
        out = out + X[:, j:j + 1] * K[:, :, j]
    return out


def _rowquad(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-row ``X[r] @ M[r] @ X[r]``."""
    MX = _rowmv(M, X)
    out = X[:, 0] * MX[:, 0]
    for j in range(1, X.shape[1]):
        out = out + X[:, j] * MX[:, j]
    return out


def _sqrt_psd(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class _Noise:
    w: np.ndarray  # (n_steps, n_x)
    v: np.ndarray  # (n_samples, n_y)


def _draw_noise(plant: PlantModel, seed, n_steps: int, n_samples: int) -> _Noise:
    rng = stream(seed, NOISE_TAG)
    zw = rng.standard_normal((n_steps, plant.n_x))
    zv = rng.standard_normal((n_samples, plant.n_y))
    return _Noise(_mv(_sqrt_psd(plant.disturbance_cov), zw),
                  _mv(_sqrt_psd(plant.measurement_noise_cov), zv))


@dataclass
class EpisodeTrace:
    time: np.ndarray        # (n_steps + 1,)
    x: np.ndarray           # (n_steps + 1, n_x)
    u: np.ndarray           # (n_steps, n_u)
    age: np.ndarray         # controller-side AoI at each step start
    events: list[str]
    schedule: Schedule = field(repr=False)

    def rows(self):
        n_x, n_u = self.x.shape[1], self.u.shape[1]
        header = (["time"] + [f"x{j}" for j in range(n_x)] + [f"u{j}" for j in range(n_u)]
                  + ["age", "events"])
        yield header
        for k in range(len(self.u)):
            yield ([self.time[k], *self.x[k], *self.u[k], self.age[k], self.events[k]])

    def packet_rows(self, link: str = "ul"):
        sched = self.schedule
        yield ["seq", "gen_time", "delivered", "attempts", "delay_air", "delay_queue",
               "delay_proc", "delay_total"]
        outcomes = sched.ul if link == "ul" else sched.dl
        for i, o in enumerate(outcomes):
            if o is None:
                continue
            gen = sched.t0 + i * sched.sample_every * sched.dt
            if link == "dl":
                gen = sched.ul_arrival[i]
            yield [i, gen, int(o.delivered), o.attempts, o.delay_air, o.delay_queue,
                   o.delay_proc, o.total_delay_s]


def _simulate(cfg: EpisodeConfig, specs: list[ControllerSpec], schedule: Schedule,
              x0: np.ndarray, noises: list[_Noise], rows: list[tuple[int, int]],
              record: bool = False):
    plant = cfg.plant
    dt, n_steps, every = plant.dt, schedule.n_steps, schedule.sample_every
    n_rows = len(rows)
    n_x, n_u = plant.n_x, plant.n_u
    K = np.stack([specs[s].gain for s, _ in rows])
    Qw = np.stack([specs[s].Q_weight for s, _ in rows])
    Rw = np.stack([specs[s].R_weight for s, _ in rows])
    zero_mask = np.array([specs[s].loss_policy is LossPolicy.ZERO_INPUT for s, _ in rows])
    pred_mask = np.array([specs[s].estimator is Estimator.MODEL_PREDICT for s, _ in rows])
    any_pred = bool(pred_mask.any())
    W = np.stack([noises[e].w for _, e in rows], axis=1)   # (n_steps, rows, n_x)
    V = np.stack([noises[e].v for _, e in rows], axis=1)   # (n_samples, rows, n_y)
    C_pinv = np.linalg.pinv(plant.C)

    powers = [np.eye(n_x)]

    def power(n):
        while len(powers) <= n:
            powers.append(plant.A @ powers[-1])
        return powers[n]

    x = np.broadcast_to(x0, (n_rows, n_x)).astype(float).copy()
    u = np.zeros((n_rows, n_u))
    J = np.zeros(n_rows)
    sq = np.zeros(n_rows)
    aoii = np.zeros(n_rows)
    alive = np.ones(n_rows, dtype=bool)
    samples: dict[int, np.ndarray] = {}
    commands: dict[int, np.ndarray] = {}
    zero_col = zero_mask[:, None]
    pred_col = pred_mask[:, None]

    if record:
        xs, us, ages, events = [x[0].copy()], [], [], []

    for k in range(n_steps):
        ev = []
        if k % every == 0 and k // every < schedule.n_samples:
            i = k // every
            s = _mv(C_pinv, _mv(plant.C, x) + V[i])
            samples[i] = s
            if record:
                ev.append(f"sample:{i}")
            if schedule.cmd_age_steps[i] >= 0:
                xh = s
                if any_pred:
                    xh = np.where(pred_col, _mv(power(int(schedule.cmd_age_steps[i])), s), s)
                commands[i] = -_rowmv(K, xh)
        if schedule.step_zero[k]:
            u = np.where(zero_col, 0.0, u)
            if record:
                ev.append("no_fresh_command")
        ia = schedule.step_apply[k]
        if ia >= 0:
            u = commands[ia]
            if record:
                ev.append(f"apply:{ia}")

        ic = schedule.step_ctrl_sample[k]
        if ic >= 0:
            est = samples[ic]
            if any_pred:
                est = np.where(pred_col, _mv(power(k - ic * every), est), est)
            incorrect = np.abs(est - x).max(axis=1) > cfg.aoii_threshold
        else:
            incorrect = np.ones(n_rows, dtype=bool)
        aoii = aoii + incorrect * schedule.aoi_step_area[k]

        J = J + (_rowquad(Qw, x) + _rowquad(Rw, u)) * dt
        x = _mv(plant.A, x) + _mv(plant.B, u) + W[k]
        sq_k = x[:, 0] * x[:, 0]
        for j in range(1, n_x):
            sq_k = sq_k + x[:, j] * x[:, j]
        sq = sq + sq_k

        bad = alive & ((J > COST_OVERFLOW) | ~np.isfinite(sq_k))
        if bad.any():
            alive &= ~bad
            x = np.where(alive[:, None], x, 0.0)
            u = np.where(alive[:, None], u, 0.0)
            for key in commands:
                commands[key] = np.where(alive[:, None], commands[key], 0.0)
        if record:
            xs.append(x[0].copy())
            us.append(u[0].copy())
            g = schedule.step_ctrl_sample[k]
            t_k = schedule.step_time(k)
            ages.append(t_k - (schedule.t0 + g * every * dt) if g >= 0 else t_k - schedule.t0)
            events.append(";".join(ev))

    trace = None
    if record:
        times = schedule.t0 + dt * np.arange(n_steps + 1)
        trace = EpisodeTrace(times, np.array(xs), np.array(us), np.array(ages), events, schedule)
    return x, J, sq, aoii, ~alive, trace


def _kpis(schedule: Schedule, x, J, sq, aoii, diverged) -> list[KpiVector]:
    horizon = schedule.n_steps * schedule.dt
    summary = schedule.aoi.summarize(horizon)
    lat = [quantile_type7(schedule.e2e_latency, q) for q in LATENCY_LEVELS]
    done = schedule.e2e_latency[np.isfinite(schedule.e2e_latency)]
    common = dict(
        e2e_latency_mean=math.fsum(done) / done.size if done.size else math.inf,
        e2e_latency_q50=lat[0], e2e_latency_q90=lat[1], e2e_latency_q999=lat[2],
        packet_loss_rate_ul=schedule.ul_loss_rate, packet_loss_rate_dl=schedule.dl_loss_rate,
        mean_aoi=float(summary.mean_aoi), peak_aoi_max=float(summary.peak_aoi_max),
        peak_aoi_mean=float(summary.peak_aoi_mean), aoi_variance=float(summary.aoi_variance),
    )
    out = []
    for r in range(len(J)):
        if diverged[r]:
            out.append(KpiVector(math.inf, math.inf, math.inf,
                                 mean_aoii=float(summary.mean_aoi), diverged=True, **common))
            continue
        out.append(KpiVector(
            terminal_state_error=float(np.sqrt(np.sum(x[r] * x[r]))),
            rms_state_error=float(np.sqrt(sq[r] / schedule.n_steps)),
            control_cost=float(J[r]),
            mean_aoii=float(aoii[r] / horizon),
            **common))
    return out


def _scenario_x0(cfg: EpisodeConfig) -> PlantState:
    return sample_initial_condition(cfg.x0_sampler, cfg.ul.params,
                                    stream(cfg.scenario_seed, X0_TAG))


def run_episode(cfg: EpisodeConfig, record: bool = True):
    """Simulate one episode; returns ``(trace, kpi)`` (``trace`` is None if not recorded)."""
    if cfg.controller is None:
        raise ValueError("episode config has no controller")
    state0 = _scenario_x0(cfg)
    schedule = build_schedule(cfg, state0.t)
    noise = _draw_noise(cfg.plant, cfg.disturbance_seed, schedule.n_steps, schedule.n_samples)
    x, J, sq, aoii, div, trace = _simulate(cfg, [cfg.controller], schedule, state0.x,
                                           [noise], [(0, 0)], record=record)
    return trace, _kpis(schedule, x, J, sq, aoii, div)[0]


def run_scenario(cfg: EpisodeConfig, specs: list[ControllerSpec], scenario_seed,
                 episode_seeds) -> list[list[KpiVector]]:
    """All ``specs`` x ``episode_seeds`` under one channel scenario.

    Returns ``kpis[spec_index][episode_index]``; each entry equals what
    :func:`run_episode` yields for the same seeds.
    """
    cfg = cfg.replace(scenario_seed=scenario_seed)
    state0 = _scenario_x0(cfg)
    schedule = build_schedule(cfg, state0.t)
    noises = [_draw_noise(cfg.plant, s, schedule.n_steps, schedule.n_samples)
              for s in episode_seeds]
    rows = [(s, e) for s in range(len(specs)) for e in range(len(episode_seeds))]
    x, J, sq, aoii, div, _ = _simulate(cfg, specs, schedule, state0.x, noises, rows)
    flat = _kpis(schedule, x, J, sq, aoii, div)
    n_e = len(episode_seeds)
    return [flat[s * n_e:(s + 1) * n_e] for s in range(len(specs))]


@dataclass
class MonteCarloResult:
    kpis: list[KpiVector]
    aggregates: dict[str, dict[str, float]]


def aggregate(kpis: list[KpiVector]) -> dict[str, dict[str, float]]:
    """Mean, 95% normal half-width and type-7 quantiles per KPI field."""
    out = {}
    n = len(kpis)
    for name in KPI_NAMES:
        vals = np.array([float(getattr(k, name)) for k in kpis])
        if np.all(np.isfinite(vals)):
            mean = float(math.fsum(vals) / n)
            sd = float(vals.std(ddof=1)) if n > 1 else 0.0
        else:
            mean = sd = math.inf
        out[name] = {
            "mean": mean,
            "ci95": 1.96 * sd / math.sqrt(n),
            "q05": quantile_type7(vals, 0.05),
            "q50": quantile_type7(vals, 0.5),
            "q95": quantile_type7(vals, 0.95),
        }
    return out


def _mc_episode(args):
    template, seeds = args
    cfg = template.replace(scenario_seed=seeds[0], disturbance_seed=seeds[1])
    return run_episode(cfg, record=False)[1]


def parallel_map(fn, items: list, workers: int = 1) -> list:
    """Order-preserving map; with ``workers > 1`` runs in worker processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def episode_seeds(base_seed: int, e: int) -> tuple[tuple, tuple]:
    return (int(base_seed), 1, e), (int(base_seed), 2, e)


def monte_carlo(template: EpisodeConfig, n_episodes: int, base_seed: int,
                workers: int = 1) -> MonteCarloResult:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    items = [(template, episode_seeds(base_seed, e)) for e in range(n_episodes)]
    kpis = parallel_map(_mc_episode, items, workers)
    return MonteCarloResult(kpis, aggregate(kpis))
