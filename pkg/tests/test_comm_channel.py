import logging
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cococo.comm_channel import (Budget, CellLoad, CommParams, Link, UnstableQueueError,
                                 air_delay, feasibility_residual, link_reliability,
                                 mean_queuing_delay, nominal_latency, packet_error_prob,
                                 queuing_delay_draw, transmit)

# finite-blocklength normal approximation evaluated at 50 digits (mpmath), rate 1, 256 bits
PER_TABLE = {0: 1.0, 5: 0.32150292557686873, 10: 7.1904830615465759e-31,
             15: 4.8280126084089231e-125}


def test_noiseless_limit():
    assert packet_error_prob(CommParams(snr_db=200.0, coding_rate=0.9)) < 1e-9


def test_shannon_limit_midpoint():
    # rate 1/2 QPSK carries 1 bit per channel use = log2(1 + 1) at 0 dB
    assert packet_error_prob(CommParams(snr_db=0.0, coding_rate=0.5)) == 0.5


def test_per_table():
    got = [packet_error_prob(CommParams(snr_db=d, coding_rate=1.0)) for d in PER_TABLE]
    np.testing.assert_allclose(got, list(PER_TABLE.values()), rtol=1e-9)
    assert all(a > b for a, b in zip(got, got[1:]))


params = st.builds(
    CommParams,
    snr_db=st.floats(-10, 25),
    bandwidth_hz=st.floats(1e5, 2e7),
    coding_rate=st.floats(0.05, 1.0),
    payload_bits=st.sampled_from([64.0, 256.0, 1024.0]),
)


def _strict_or_saturated(lo, hi):
    """``lo < hi`` unless both ends sit at a double-precision saturation value."""
    if lo == hi:
        return lo in (0.0, 1.0)
    return lo < hi


@given(params, st.floats(0.01, 10.0))
def test_per_decreasing_in_snr(z, delta):
    worse = packet_error_prob(z)
    better = packet_error_prob(z.replace(snr_db=z.snr_db + delta))
    assert _strict_or_saturated(better, worse)


@given(params, st.floats(1.01, 4.0))
def test_per_decreasing_in_bandwidth(z, factor):
    worse = packet_error_prob(z)
    better = packet_error_prob(z.replace(bandwidth_hz=z.bandwidth_hz * factor))
    assert _strict_or_saturated(better, worse)


@given(params, st.floats(0.01, 0.5))
def test_per_increasing_in_rate(z, delta):
    assume(z.coding_rate + delta <= 1.0)
    lower = packet_error_prob(z)
    higher = packet_error_prob(z.replace(coding_rate=z.coding_rate + delta))
    assert _strict_or_saturated(lower, higher)


def test_forced_outcomes(rng):
    z = CommParams(max_retx=2)
    ok = transmit(z, rng, per=0.0)
    assert ok.delivered and ok.attempts == 1
    lost = transmit(z, rng, per=1.0)
    assert not lost.delivered and lost.attempts == 3
    assert math.isnan(lost.total_delay_s)


def test_compounded_loss_half():
    rng = np.random.default_rng(7)
    z = CommParams(max_retx=1)
    n = 100_000
    lost = sum(not transmit(z, rng, per=0.5).delivered for _ in range(n))
    assert abs(lost / n - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)


@pytest.mark.parametrize("p,k,expected", [(0.1, 0, 0.9), (0.1, 1, 0.99), (1e-3, 1, 0.999999)])
def test_link_reliability(p, k, expected):
    assert link_reliability(CommParams(max_retx=k), per=p) == pytest.approx(expected, abs=1e-15)


def test_feasibility_residual():
    b = Budget(max_bandwidth_hz=5e6, max_snr_db=20.0, min_coding_rate=0.2)
    at = CommParams(bandwidth_hz=5e6, snr_db=20.0, coding_rate=0.2)
    assert np.array_equal(feasibility_residual(at, b), [0.0, 0.0, 0.0])
    wide = at.replace(bandwidth_hz=1e7)
    assert feasibility_residual(wide, b)[0] > 0
    inside = CommParams(bandwidth_hz=1e6, snr_db=10.0, coding_rate=0.5)
    assert np.all(feasibility_residual(inside, b) < 0)


def test_queue_mean_and_instability(rng):
    z = CommParams(queue_rate=100.0)
    idle = CellLoad(utilization=0.0)
    draws = np.array([queuing_delay_draw(z, rng, idle) for _ in range(100_000)])
    assert draws.mean() == pytest.approx(0.01, rel=0.01)
    saturated = CellLoad(pool_bandwidth_hz=1e6, utilization=1.0)
    with pytest.raises(UnstableQueueError):
        mean_queuing_delay(CommParams(bandwidth_hz=1e6, queue_rate=100.0), saturated)


def test_payload_raises_queuing_delay():
    z = CommParams(payload_bits=256.0)
    assert mean_queuing_delay(z.replace(payload_bits=512.0)) > mean_queuing_delay(z)


def test_coding_rate_clamped(caplog):
    with caplog.at_level(logging.WARNING):
        z = CommParams(coding_rate=0.0)
    assert z.coding_rate == 1e-6
    assert "clamped" in caplog.text


@pytest.mark.parametrize("field,value", [("coding_rate", 1.5), ("bandwidth_hz", 0.0),
                                         ("payload_bits", -1.0), ("max_retx", -1),
                                         ("max_retx", 1.5), ("sampling_period_s", 0.0)])
def test_invalid_params(field, value):
    with pytest.raises(ValueError):
        CommParams(**{field: value})


@given(st.integers(0, 5), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_outcome_invariants(k, p, seed):
    z = CommParams(max_retx=k)
    o = transmit(z, np.random.default_rng(seed), per=p)
    assert 1 <= o.attempts <= k + 1
    if o.delivered:
        assert o.total_delay_s == pytest.approx(o.delay_air + o.delay_queue + o.delay_proc)
        assert o.total_delay_s >= o.attempts * (air_delay(z) + z.proc_delay_s) - 1e-15
    else:
        assert o.attempts == k + 1


@given(st.floats(-5, 10), st.integers(0, 2**32 - 1))
def test_retx_tradeoff_pathwise(snr, seed):
    """On a shared stream, one more retransmission never loses a delivered packet."""
    z0 = CommParams(snr_db=snr, coding_rate=0.6, max_retx=0)
    prev_rel = -1.0
    prev_lat = 0.0
    for k in range(4):
        z = z0.replace(max_retx=k)
        rel = link_reliability(z)
        assert rel >= prev_rel
        lat = nominal_latency(z)
        assert lat >= prev_lat
        prev_rel, prev_lat = rel, lat
    a = transmit(z0, np.random.default_rng(seed))
    b = transmit(z0.replace(max_retx=2), np.random.default_rng(seed))
    assert b.delivered >= a.delivered
    if a.delivered:
        assert b.attempts == a.attempts and b.total_delay_s == a.total_delay_s


def test_mean_delay_grows_with_retx():
    z = CommParams(snr_db=0.0, coding_rate=0.5)  # p = 1/2
    means = []
    for k in range(4):
        rng = np.random.default_rng(3)
        d = [transmit(z.replace(max_retx=k), rng) for _ in range(20_000)]
        means.append(np.mean([o.total_delay_s for o in d if o.delivered]))
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_transmit_deterministic():
    z = CommParams(snr_db=0.5, max_retx=2)
    a = [transmit(z, np.random.default_rng(11)) for _ in range(3)]
    s1 = np.random.default_rng(11)
    s2 = np.random.default_rng(11)
    assert [transmit(z, s1) for _ in range(50)] == [transmit(z, s2) for _ in range(50)]
    assert a[0] == a[1]


def test_link_modes(rng):
    z = CommParams(max_retx=1)
    ideal = Link(z, ideal=True).transmit(rng)
    assert ideal.delivered and ideal.total_delay_s == 0.0
    fixed = Link(z, per=0.0, fixed_delay_s=0.003).transmit(rng)
    assert fixed.total_delay_s == 0.003
    assert Link(z, per=0.1).reliability() == pytest.approx(0.99)
