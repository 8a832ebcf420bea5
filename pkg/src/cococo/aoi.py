"""Age of information (AoI) and age of incorrect information (AoII).

Age at time ``t`` is ``t - g`` where ``g`` is the generation time of the
freshest update received so far. Age grows with slope one between deliveries,
so its time integral is accumulated exactly by trapezoids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["AoiTracker", "AoiSummary"]


@dataclass(frozen=True)
class AoiSummary:
    mean_aoi: float
    peak_aoi_mean: float
    peak_aoi_max: float
    mean_aoii: float
    aoi_variance: float
    n_peaks: int
    # set when no update was delivered; peak stats then hold the final age
    no_deliveries: bool = False


@dataclass
class AoiTracker:
    last_informative_gen_time: float = 0.0
    current_time: float = 0.0
    peak_log: list[float] = field(default_factory=list)
    area_accum: float = 0.0
    aoii_area_accum: float = 0.0
    # integral of squared age, for the age variance
    sq_area_accum: float = 0.0
    elapsed: float = 0.0

    @classmethod
    def start(cls, t0: float = 0.0) -> "AoiTracker":
        return cls(last_informative_gen_time=t0, current_time=t0)

    @property
    def age(self) -> float:
        return self.current_time - self.last_informative_gen_time

    def advance(self, dt: float, incorrect: bool = False) -> "AoiTracker":
        """Move the clock forward by ``dt``; age-while-incorrect counts only if ``incorrect``."""
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        a0 = self.age
        a1 = a0 + dt
        piece = 0.5 * (a0 + a1) * dt
        self.area_accum += piece
        self.sq_area_accum += (a1**3 - a0**3) / 3.0
        if incorrect:
            self.aoii_area_accum += piece
        self.current_time += dt
        self.elapsed += dt
        return self

    def on_delivery(self, gen_time: float) -> "AoiTracker":
        """Register an update generated at ``gen_time``; stale updates are ignored."""
        if gen_time > self.current_time + 1e-12:
            raise ValueError(
                f"update generated at {gen_time} lies after current time {self.current_time}")
        if gen_time > self.last_informative_gen_time:
            self.peak_log.append(self.current_time - self.last_informative_gen_time)
            self.last_informative_gen_time = gen_time
        return self

    def summarize(self, horizon_s: float | None = None) -> AoiSummary:
        horizon = self.elapsed if horizon_s is None else horizon_s
        if not horizon > 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        if not math.isclose(horizon, self.elapsed, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"horizon {horizon} differs from advanced time {self.elapsed}")
        mean = self.area_accum / horizon
        var = max(self.sq_area_accum / horizon - mean**2, 0.0)
        if self.peak_log:
            peaks = np.asarray(self.peak_log)
            return AoiSummary(mean, float(peaks.mean()), float(peaks.max()),
                              self.aoii_area_accum / horizon, var, len(peaks))
        return AoiSummary(mean, self.age, self.age, self.aoii_area_accum / horizon,
                          var, 0, no_deliveries=True)
