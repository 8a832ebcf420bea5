"""Uplink/downlink model: packet errors, latency components and ARQ.

Single-attempt packet error probability follows the normal approximation of
finite-blocklength coding over an AWGN channel::

    p = Q( sqrt(n) * (C(snr) - R) / sqrt(V(snr)) )

with ``C = log2(1 + snr)`` bits per channel use, dispersion
``V = (1 - (1 + snr)**-2) * log2(e)**2`` and transmitted rate
``R = coding_rate * BITS_PER_SYMBOL``. The blocklength is
``n = payload_bits / R`` channel uses.

Bandwidth above the reference allocation is used for frequency repetition,
so the effective SINR is ``snr * bandwidth_hz / REFERENCE_BANDWIDTH_HZ``.
Wider allocations also shorten the air time but load the shared resource
pool, which raises queuing delay (see :func:`arrival_rate`).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

BITS_PER_SYMBOL = 2.0  # QPSK
REFERENCE_BANDWIDTH_HZ = 1e6
MIN_CODING_RATE = 1e-6
LOG2E = math.log2(math.e)

__all__ = [
    "CommParams",
    "CellLoad",
    "Budget",
    "DeliveryOutcome",
    "Link",
    "UnstableQueueError",
    "packet_error_prob",
    "air_delay",
    "arrival_rate",
    "mean_queuing_delay",
    "queuing_delay_draw",
    "transmit",
    "link_reliability",
    "feasibility_residual",
    "nominal_latency",
    "average_power",
]


class UnstableQueueError(ValueError):
    """Arrival rate at or above the service rate."""


@dataclass(frozen=True)
class CommParams:
    """Communication design vector for one link.

    Field order is the coordinate order used by the optimizer.
    """

    snr_db: float = 10.0
    bandwidth_hz: float = 1e6
    coding_rate: float = 0.5
    max_retx: int = 0
    payload_bits: float = 256.0
    proc_delay_s: float = 1e-4
    queue_rate: float = 1e4
    sampling_period_s: float = 0.01

    def __post_init__(self):
        if self.coding_rate < MIN_CODING_RATE and self.coding_rate >= 0:
            logger.warning("coding_rate %g clamped to %g", self.coding_rate, MIN_CODING_RATE)
            object.__setattr__(self, "coding_rate", MIN_CODING_RATE)
        if not (0 < self.coding_rate <= 1):
            raise ValueError(f"coding_rate must lie in (0, 1], got {self.coding_rate}")
        if not self.bandwidth_hz > 0:
            raise ValueError(f"bandwidth_hz must be positive, got {self.bandwidth_hz}")
        if not self.payload_bits > 0:
            raise ValueError(f"payload_bits must be positive, got {self.payload_bits}")
        if not self.sampling_period_s > 0:
            raise ValueError(f"sampling_period_s must be positive, got {self.sampling_period_s}")
        if int(self.max_retx) != self.max_retx or self.max_retx < 0:
            raise ValueError(f"max_retx must be a non-negative integer, got {self.max_retx}")
        if self.proc_delay_s < 0:
            raise ValueError(f"proc_delay_s must be non-negative, got {self.proc_delay_s}")
        if not self.queue_rate > 0:
            raise ValueError(f"queue_rate must be positive, got {self.queue_rate}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        object.__setattr__(self, "max_retx", int(self.max_retx))

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    def to_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, n)) for n in self.field_names()])

    @classmethod
    def from_vector(cls, vec) -> "CommParams":
        vals = dict(zip(cls.field_names(), (float(v) for v in vec)))
        vals["max_retx"] = int(round(vals["max_retx"]))
        return cls(**vals)

    def replace(self, **changes) -> "CommParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CellLoad:
    """Shared radio resource pool seen by the link's scheduler queue.

    ``utilization`` is the pool utilization produced by a device holding the
    reference bandwidth with a reference-size payload; it scales linearly with
    the bandwidth share and the payload size.
    """

    pool_bandwidth_hz: float = 20e6
    utilization: float = 0.5
    reference_payload_bits: float = 256.0


@dataclass(frozen=True)
class Budget:
    """Resource budget behind the constraint ``f(z) <= 0``.

    ``max_avg_power`` bounds the mean radiated power in units of linear SNR at
    the reference bandwidth (energy per packet divided by sampling period,
    normalized so that one reference-length packet per second at SNR 1 costs
    one unit). ``None`` disables that component.
    """

    max_bandwidth_hz: float = 20e6
    max_snr_db: float = 30.0
    min_coding_rate: float = 0.1
    max_avg_power: float | None = None


@dataclass(frozen=True)
class DeliveryOutcome:
    delivered: bool
    attempts: int
    total_delay_s: float  # nan when the packet is lost
    delay_air: float
    delay_queue: float
    delay_proc: float

    @property
    def components(self) -> dict[str, float]:
        return {"air": self.delay_air, "queuing": self.delay_queue,
                "processing": self.delay_proc,
                "retransmission": self.retransmission_delay}

    @property
    def retransmission_delay(self) -> float:
        """Share of the elapsed time spent on attempts after the first."""
        if self.attempts <= 1:
            return 0.0
        spent = self.delay_air + self.delay_queue + self.delay_proc
        return spent * (self.attempts - 1) / self.attempts


def _capacity_dispersion(snr_lin: float) -> tuple[float, float]:
    cap = math.log2(1.0 + snr_lin)
    disp = (1.0 - 1.0 / (1.0 + snr_lin) ** 2) * LOG2E**2
    return cap, disp


def effective_snr(params: CommParams) -> float:
    return 10.0 ** (params.snr_db / 10.0) * params.bandwidth_hz / REFERENCE_BANDWIDTH_HZ


def packet_error_prob(params: CommParams) -> float:
    """Single-attempt packet error probability."""
    snr = effective_snr(params)
    rate = params.coding_rate * BITS_PER_SYMBOL
    n = params.payload_bits / rate
    cap, disp = _capacity_dispersion(snr)
    if disp <= 0.0:
        return 1.0
    arg = math.sqrt(n) * (cap - rate) / math.sqrt(disp)
    return float(ndtr(-arg))


def air_delay(params: CommParams) -> float:
    """Over-the-air time of one attempt, seconds."""
    return params.payload_bits / (params.coding_rate * params.bandwidth_hz * BITS_PER_SYMBOL)


def arrival_rate(params: CommParams, cell: CellLoad = CellLoad()) -> float:
    """Packet arrival rate at the shared scheduler, packets per second."""
    util = (cell.utilization * (params.bandwidth_hz / cell.pool_bandwidth_hz)
            * (params.payload_bits / cell.reference_payload_bits))
    return util * params.queue_rate


def mean_queuing_delay(params: CommParams, cell: CellLoad = CellLoad()) -> float:
    lam = arrival_rate(params, cell)
    if lam >= params.queue_rate:
        raise UnstableQueueError(
            f"arrival rate {lam:g}/s >= service rate {params.queue_rate:g}/s")
    return 1.0 / (params.queue_rate - lam)


def queuing_delay_draw(params: CommParams, rng: np.random.Generator,
                       cell: CellLoad = CellLoad()) -> float:
    """M/M/1 waiting time draw, exponential with mean ``1/(mu - lambda)``."""
    return float(rng.exponential(mean_queuing_delay(params, cell)))


DRAW_BLOCK = 8


def _attempt_draws(rng: np.random.Generator, max_retx: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniforms and unit exponentials for one packet.

    A packet always consumes at least ``DRAW_BLOCK`` attempts' worth of draws,
    so the k-th attempt of the i-th packet sees the same numbers whatever the
    retransmission budget or error probability. Outcomes are then paired
    across designs evaluated on the same stream.
    """
    n = max(DRAW_BLOCK, max_retx + 1)
    return rng.random(n), rng.standard_exponential(n)


def transmit(params: CommParams, rng: np.random.Generator, cell: CellLoad = CellLoad(),
             per: float | None = None) -> DeliveryOutcome:
    """Send one packet with up to ``max_retx`` ARQ retransmissions.

    ``per`` overrides the single-attempt error probability. Attempt ``j``
    fails when its uniform draw is below ``p``; its queuing delay is the
    ``j``-th unit exponential scaled by the M/M/1 mean.
    """
    p = packet_error_prob(params) if per is None else float(per)
    air = air_delay(params)
    mean_q = mean_queuing_delay(params, cell)
    uniforms, expo = _attempt_draws(rng, params.max_retx)
    total_air = total_q = total_proc = 0.0
    attempts = 0
    delivered = False
    while attempts < params.max_retx + 1:
        total_air += air
        total_q += mean_q * float(expo[attempts])
        total_proc += params.proc_delay_s
        ok = uniforms[attempts] >= p
        attempts += 1
        if ok:
            delivered = True
            break
    total = total_air + total_q + total_proc if delivered else math.nan
    return DeliveryOutcome(delivered, attempts, total, total_air, total_q, total_proc)


def link_reliability(params: CommParams, per: float | None = None) -> float:
    """Probability that a packet is eventually delivered, ``1 - p**(k+1)``."""
    p = packet_error_prob(params) if per is None else per
    return 1.0 - p ** (params.max_retx + 1)


def nominal_latency(params: CommParams, cell: CellLoad = CellLoad()) -> float:
    """Latency of a packet that uses every attempt, at mean queuing delay."""
    per_attempt = air_delay(params) + mean_queuing_delay(params, cell) + params.proc_delay_s
    return (params.max_retx + 1) * per_attempt


def average_power(params: CommParams) -> float:
    """Mean radiated power in budget units (see :class:`Budget`)."""
    snr = 10.0 ** (params.snr_db / 10.0)
    energy = snr * air_delay(params) * params.bandwidth_hz / REFERENCE_BANDWIDTH_HZ
    # scale so that a reference packet (256 bits, rate 1/2) sent once a second at snr 1 costs 1
    ref_energy = 256.0 / (0.5 * REFERENCE_BANDWIDTH_HZ * BITS_PER_SYMBOL)
    return energy / ref_energy / params.sampling_period_s


def feasibility_residual(params: CommParams, budget: Budget) -> np.ndarray:
    """Componentwise ``f(z)``; all entries ``<= 0`` iff ``params`` fit the budget.

    Order: bandwidth, SNR, coding rate, then average power when enabled.
    """
    res = [
        params.bandwidth_hz - budget.max_bandwidth_hz,
        params.snr_db - budget.max_snr_db,
        budget.min_coding_rate - params.coding_rate,
    ]
    if budget.max_avg_power is not None:
        res.append(average_power(params) - budget.max_avg_power)
    return np.array(res, dtype=float)


@dataclass(frozen=True)
class Link:
    """One direction of the loop: parameters plus optional test overrides.

    ``per`` forces the single-attempt error probability. ``fixed_delay_s``
    replaces the latency model by a constant per attempt (no random draws for
    delay; the success draw is still taken). ``ideal`` delivers every packet
    instantly without touching the random stream.
    """

    params: CommParams = CommParams()
    cell: CellLoad = CellLoad()
    per: float | None = None
    fixed_delay_s: float | None = None
    ideal: bool = False

    def transmit(self, rng: np.random.Generator) -> DeliveryOutcome:
        if self.ideal:
            return DeliveryOutcome(True, 1, 0.0, 0.0, 0.0, 0.0)
        if self.fixed_delay_s is not None:
            p = packet_error_prob(self.params) if self.per is None else self.per
            uniforms, _ = _attempt_draws(rng, self.params.max_retx)
            for attempts in range(1, self.params.max_retx + 2):
                if uniforms[attempts - 1] >= p:
                    d = attempts * self.fixed_delay_s
                    return DeliveryOutcome(True, attempts, d, 0.0, 0.0, d)
            d = (self.params.max_retx + 1) * self.fixed_delay_s
            return DeliveryOutcome(False, self.params.max_retx + 1, math.nan, 0.0, 0.0, d)
        return transmit(self.params, rng, self.cell, self.per)

    def reliability(self) -> float:
        if self.ideal:
            return 1.0
        return link_reliability(self.params, self.per)
