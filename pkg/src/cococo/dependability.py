"""Reliability layer: structure functions, demand sets and reliability estimators.

Also hosts the monotone regression mapping communication reliabilities to
application reliability, used to answer "how reliable must the link be for a
target application reliability".
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "StructureKind",
    "StructureFunction",
    "DemandSet",
    "MissingKpiError",
    "ReliabilityEstimate",
    "RegressionModel",
    "Inversion",
    "structure_eval",
    "indicator",
    "q2",
    "wilson_interval",
    "performance_reliability",
    "exit_times",
    "FailureStats",
    "mttf_mtbf",
    "pava",
    "fit_reliability_regression",
]

Z95 = 1.959963984540054


class StructureKind(str, enum.Enum):
    SERIES = "series"
    PARALLEL = "parallel"
    K_OUT_OF_N = "k_out_of_n"


@dataclass(frozen=True)
class StructureFunction:
    kind: StructureKind
    arity: int
    k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StructureKind(self.kind))
        if self.arity < 1:
            raise ValueError("arity must be >= 1")
        if self.kind is StructureKind.K_OUT_OF_N:
            if self.k is None or not 1 <= self.k <= self.arity:
                raise ValueError(f"k must satisfy 1 <= k <= {self.arity}, got {self.k}")

    @classmethod
    def series(cls, n: int) -> "StructureFunction":
        return cls(StructureKind.SERIES, n)

    @classmethod
    def parallel(cls, n: int) -> "StructureFunction":
        return cls(StructureKind.PARALLEL, n)

    @classmethod
    def k_out_of_n(cls, k: int, n: int) -> "StructureFunction":
        return cls(StructureKind.K_OUT_OF_N, n, k)


def structure_eval(phi: StructureFunction, states: Sequence) -> bool:
    """System state from binary component states (1 = working)."""
    s = [bool(v) for v in states]
    if len(s) != phi.arity:
        raise ValueError(f"expected {phi.arity} component states, got {len(s)}")
    if phi.kind is StructureKind.SERIES:
        return all(s)
    if phi.kind is StructureKind.PARALLEL:
        return any(s)
    return sum(s) >= phi.k


class MissingKpiError(KeyError):
    pass


@dataclass(frozen=True)
class DemandSet:
    """Axis-aligned box of acceptable KPI values; bounds are closed, ``None`` is open."""

    bounds: Mapping[str, tuple]
    fail_on_diverged: bool = True

    def __post_init__(self):
        clean = {}
        for name, (lo, hi) in dict(self.bounds).items():
            lo = None if lo is None else float(lo)
            hi = None if hi is None else float(hi)
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"demand bound for {name}: lower {lo} > upper {hi}")
            clean[name] = (lo, hi)
        object.__setattr__(self, "bounds", clean)

    @property
    def is_unbounded(self) -> bool:
        return all(lo is None and hi is None for lo, hi in self.bounds.values())

    def to_dict(self) -> dict:
        return {"bounds": {k: list(v) for k, v in self.bounds.items()},
                "fail_on_diverged": self.fail_on_diverged}


def _lookup(y, name):
    if isinstance(y, Mapping):
        if name not in y:
            raise MissingKpiError(name)
        return y[name]
    if not hasattr(y, name):
        raise MissingKpiError(name)
    return getattr(y, name)


def indicator(y, d: DemandSet) -> int:
    """1 if every bounded KPI of ``y`` lies in its closed interval, else 0."""
    ok = True
    for name, (lo, hi) in d.bounds.items():
        if lo is None and hi is None:
            continue
        v = float(_lookup(y, name))
        if math.isnan(v) or (lo is not None and v < lo) or (hi is not None and v > hi):
            ok = False
    if d.fail_on_diverged and not d.is_unbounded:
        try:
            if bool(_lookup(y, "diverged")):
                ok = False
        except MissingKpiError:
            pass
    return int(ok)


def q2(y, d: DemandSet) -> int:
    """Unreliability indicator ``1 - I(y)``."""
    return 1 - indicator(y, d)


@dataclass(frozen=True)
class ReliabilityEstimate:
    point: float
    ci_halfwidth: float
    n_samples: int
    ci_low: float
    ci_high: float
    method: str = "normal"
    successes: int = 0

    def to_dict(self) -> dict:
        return {"point": self.point, "ci_halfwidth": self.ci_halfwidth,
                "n_samples": self.n_samples, "successes": self.successes,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high, "method": self.method}


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def _proportion(successes: int, n: int) -> ReliabilityEstimate:
    if n < 1:
        raise ValueError("need at least one sample")
    p = successes / n
    if successes in (0, n):
        lo, hi = wilson_interval(successes, n)
        return ReliabilityEstimate(p, (hi - lo) / 2, n, lo, hi, "wilson", successes)
    half = Z95 * math.sqrt(p * (1 - p) / n)
    return ReliabilityEstimate(p, half, n, max(0.0, p - half), min(1.0, p + half),
                               successes=successes)


def performance_reliability(samples: Sequence, d: DemandSet) -> ReliabilityEstimate:
    """Monte Carlo estimate of ``P(y in D)`` with a 95% interval."""
    hits = sum(indicator(y, d) for y in samples)
    return _proportion(hits, len(samples))


def exit_times(in_set: Sequence[bool], times: Sequence[float]) -> list[float]:
    """Times at which a sampled performance state leaves the demand set."""
    out = []
    prev = True
    for ok, t in zip(in_set, times):
        if prev and not ok:
            out.append(float(t))
        prev = bool(ok)
    return out


@dataclass(frozen=True)
class FailureStats:
    mttf_s: float
    mtbf_s: float
    n_failed_episodes: int
    n_episodes: int
    censored: bool
    mtbf_available: bool


def mttf_mtbf(failure_times: Sequence, horizon_s: float | None = None) -> FailureStats:
    """Empirical MTTF and MTBF.

    ``failure_times`` holds one sequence of exit times per episode (a bare
    number counts as a one-failure episode). MTTF averages the first exit over
    failing episodes; MTBF averages gaps between successive exits within an
    episode. Without any failure, MTTF is the horizon flagged as a censored
    lower bound.
    """
    episodes = [[float(t)] if np.isscalar(t) else [float(v) for v in t] for t in failure_times]
    firsts = [ep[0] for ep in episodes if ep]
    gaps = [b - a for ep in episodes for a, b in zip(ep, ep[1:])]
    if firsts:
        mttf = math.fsum(firsts) / len(firsts)
        censored = len(firsts) < len(episodes)
    else:
        mttf = math.inf if horizon_s is None else float(horizon_s)
        censored = True
    mtbf = math.fsum(gaps) / len(gaps) if gaps else math.nan
    return FailureStats(mttf, mtbf, len(firsts), len(episodes), censored, bool(gaps))


def pava(y, w=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            wsum = wts[-2] + wts[-1]
            merged = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / wsum
            size = sizes[-2] + sizes[-1]
            del vals[-1], wts[-1], sizes[-1]
            vals[-1], wts[-1], sizes[-1] = merged, wsum, size
    return np.repeat(vals, sizes)


_EPS = 1e-12


def _logit(p):
    return logit(np.clip(np.asarray(p, dtype=float), _EPS, 1 - _EPS))


@dataclass
class Inversion:
    required: float
    reachable: bool
    extrapolated: bool
    message: str = ""


@dataclass
class RegressionModel:
    """Additive monotone model on the logit scale.

    ``logit R_app = intercept + sum_j g_j(logit R_com_j)`` with each ``g_j``
    non-decreasing, piecewise linear between knots and flat outside them.
    """

    intercept: float
    knots: list[np.ndarray]
    values: list[np.ndarray]
    low_rank: bool = False
    observed_min: np.ndarray = field(default=None)
    observed_max: np.ndarray = field(default=None)

    @property
    def dim(self) -> int:
        return len(self.knots)

    def _link(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            X = X.reshape(-1, self.dim)
        U = _logit(X)
        t = np.full(U.shape[0], self.intercept)
        for j in range(self.dim):
            t = t + np.interp(U[:, j], self.knots[j], self.values[j])
        return t

    def predict(self, X) -> np.ndarray:
        return np.clip(expit(self._link(X)), 0.0, 1.0)

    def invert(self, target: float, axis: int = 0, fixed=None, iters: int = 200) -> Inversion:
        """Smallest value on ``axis`` whose prediction reaches ``target``.

        Other coordinates are held at ``fixed`` (defaults to their observed
        maxima). The search is restricted to the observed range of ``axis``.
        """
        base = (np.array(self.observed_max, dtype=float) if fixed is None
                else np.array(fixed, dtype=float).reshape(self.dim))
        lo, hi = float(self.observed_min[axis]), float(self.observed_max[axis])

        def at(r):
            x = base.copy()
            x[axis] = r
            return float(self.predict(x[None, :])[0])

        if at(hi) < target:
            return Inversion(math.nan, False, False,
                             "unreachable within swept region")
        if at(lo) >= target:
            return Inversion(lo, True, True,
                             "target met at the lowest observed value; requirement may be looser")
        a, b = _logit(lo), _logit(hi)
        for _ in range(iters):
            m = 0.5 * (a + b)
            if at(float(expit(m))) >= target:
                b = m
            else:
                a = m
        return Inversion(float(expit(b)), True, False)

    def to_dict(self) -> dict:
        return {"intercept": self.intercept,
                "knots": [k.tolist() for k in self.knots],
                "values": [v.tolist() for v in self.values],
                "low_rank": self.low_rank,
                "observed_min": np.asarray(self.observed_min).tolist(),
                "observed_max": np.asarray(self.observed_max).tolist()}


def _fit_component(u: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(u, kind="stable")
    us, rs = u[order], r[order]
    knots, inv = np.unique(us, return_inverse=True)
    # average ties before pooling so each knot carries its sample weight
    sums = np.bincount(inv, weights=rs)
    counts = np.bincount(inv)
    fitted = pava(sums / counts, counts)
    return knots, fitted


def fit_reliability_regression(pairs: Sequence, max_iter: int = 200,
                               tol: float = 1e-12) -> RegressionModel:
    """Fit ``R_app = f(R_com)`` from ``(R_com vector, R_app)`` pairs.

    Least squares on the logit scale under a non-decreasing constraint per
    coordinate, solved by backfitting with pool-adjacent-violators.
    """
    X = np.array([np.atleast_1d(np.asarray(p[0], dtype=float)) for p in pairs])
    y = np.array([float(p[1]) for p in pairs])
    n, d = X.shape
    if n < d + 2:
        raise ValueError(f"need at least {d + 2} pairs for {d} inputs, got {n}")
    if np.any((X < 0) | (X > 1)) or np.any((y < 0) | (y > 1)):
        raise ValueError("reliabilities must lie in [0, 1]")
    U = _logit(X)
    t = _logit(y)
    low_rank = bool(np.any(np.ptp(U, axis=0) == 0))
    intercept = float(np.mean(t))
    comps = [np.zeros(n) for _ in range(d)]
    knots = [np.array([U[0, j]]) for j in range(d)]
    values = [np.zeros(1) for _ in range(d)]
    for _ in range(max_iter):
        change = 0.0
        for j in range(d):
            partial = t - intercept - sum(comps[i] for i in range(d) if i != j)
            kj, vj = _fit_component(U[:, j], partial)
            shift = float(np.mean(np.interp(U[:, j], kj, vj)))
            vj = vj - shift
            new = np.interp(U[:, j], kj, vj)
            change = max(change, float(np.max(np.abs(new - comps[j]))))
            comps[j], knots[j], values[j] = new, kj, vj
        intercept = float(np.mean(t - sum(comps)))
        if d == 1 or change < tol:
            break
    return RegressionModel(intercept, knots, values, low_rank,
                           X.min(axis=0), X.max(axis=0))
