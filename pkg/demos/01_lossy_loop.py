"""A double integrator closed over a lossy wireless link.

Walks the signal-to-noise ratio down and watches what happens to the loop:
packet loss grows, information gets older and the control cost climbs.

    python3 demos/01_lossy_loop.py
"""

import numpy as np

from cococo import (CandidateRecipe, CommParams, EpisodeConfig, Link, X0Sampler,
                    double_integrator, monte_carlo, packet_error_prob)
from cococo.controller import instantiate

plant = double_integrator(dt=0.002, disturbance_std=0.2)
recipe = CandidateRecipe(np.eye(2), np.array([[0.1]]))

# Short packets, one retransmission allowed, 50 Hz sampling.
base = CommParams(snr_db=6.0, payload_bits=256.0, max_retx=1, sampling_period_s=0.02)

print(f"{'snr dB':>7} {'PER':>9} {'loss ul':>8} {'mean AoI ms':>12} {'cost':>8} {'|x(T)|':>8}")
for snr in (6.0, 3.0, 1.0, 0.0, -1.0, -2.0):
    z = base.replace(snr_db=snr)
    cfg = EpisodeConfig(plant, Link(z), Link(z), None, 2.0, X0Sampler(mean=(1.0, 0.0)))
    cfg = cfg.replace(controller=instantiate(recipe, plant, z.sampling_period_s))
    mc = monte_carlo(cfg, 40, base_seed=1)
    agg = mc.aggregates
    print(f"{snr:7.1f} {packet_error_prob(z):9.2e} {agg['packet_loss_rate_ul']['mean']:8.3f} "
          f"{1e3 * agg['mean_aoi']['mean']:12.2f} {agg['control_cost']['mean']:8.3f} "
          f"{agg['terminal_state_error']['mean']:8.3f}")

# Dead-reckoning only matters once samples are older than a plant step. At 0 dB
# the radio delay is well under 2 ms, so put the loop on a slow link instead.
z = base.replace(snr_db=0.0)
slow = Link(z, per=0.25, fixed_delay_s=0.008)
cfg = EpisodeConfig(plant, slow, slow, None, 2.0, X0Sampler(mean=(1.0, 0.0)))
for est in ("LatestSample", "ModelPredict"):
    spec = instantiate(CandidateRecipe(np.eye(2), np.array([[0.1]]), estimator=est), plant,
                       z.sampling_period_s)
    agg = monte_carlo(cfg.replace(controller=spec), 40, base_seed=1).aggregates
    print(f"8 ms per attempt, {est:<12}: cost {agg['control_cost']['mean']:.4f}")
