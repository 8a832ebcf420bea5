"""Where does the loop work, and what must the link guarantee?

First a grid over SNR and the retransmission budget, marking each point as
feasible (meets the application reliability floor) and Pareto-efficient on
cost, tail latency and loss. Then the same sweep is turned around: fit
application reliability as a monotone function of link reliability and ask
how reliable the link has to be for a few application targets.

    python3 demos/03_feasibility_and_sla.py
"""

from pathlib import Path

import numpy as np

from cococo.codesign import feasibility_region_sweep, saa_objective
from cococo.comm_channel import link_reliability
from cococo.config import build_problem, load_config
from cococo.dependability import fit_reliability_regression

# a longer episode lets a good link settle, so reliability rises with link quality
cfg = load_config(Path(__file__).parents[1] / "configs/quickstart.yaml",
                  ["episode.horizon_s=2.0", "demand_set.bounds.terminal_state_error=[0.0, 0.4]",
                   "problem.n_outer_samples=8", "problem.n_inner_samples=8"])
problem = build_problem(cfg)

snrs = [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0]
retx = [0, 1, 2]
points = [problem.z0.replace(snr_db=s, max_retx=r) for r in retx for s in snrs]
rows = feasibility_region_sweep(points, problem, cfg.run.seed,
                                ["control_cost", "e2e_latency_q999", "packet_loss_rate_ul"])

# F = feasible, * = Pareto, . = neither
print("retx \\ snr " + "".join(f"{s:>7.1f}" for s in snrs))
for r in retx:
    cells = []
    for row in rows:
        if row["z"]["max_retx"] == r:
            mark = ("F" if row["feasible"] else "") + ("*" if row["pareto"] else "")
            cells.append(f"{mark or '.':>7}")
    print(f"{r:>10} " + "".join(cells))

# Application reliability against link reliability, no retransmissions
pairs = []
for s in np.linspace(-1.0, 1.5, 10):
    z = problem.z0.replace(snr_db=float(s), max_retx=0)
    pairs.append((link_reliability(z), 1.0 - saa_objective(z, problem, cfg.run.seed).q2))
model = fit_reliability_regression([([a], b) for a, b in pairs])

print("\nlink reliability -> application reliability (fitted)")
for a, b in pairs:
    print(f"  {a:.4f} -> {b:.3f}  (fit {model.predict(np.array([[a]]))[0]:.3f})")
for target in (0.5, 0.8, 0.95, 0.999999):
    inv = model.invert(target)
    verdict = "ok" if inv.reachable and not inv.extrapolated else inv.message
    print(f"target {target:<9}: link must reach {inv.required:.4f}  [{verdict}]")
