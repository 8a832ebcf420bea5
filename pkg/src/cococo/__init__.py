"""Networked control system simulator and communication-control co-design."""

from .codesign import (CodesignProblem, DesignReport, feasibility_region_sweep, optimize,
                       saa_objective, topdown_baseline)
from .comm_channel import (Budget, CellLoad, CommParams, Link, link_reliability,
                           packet_error_prob, transmit)
from .controller import (CandidateRecipe, ControllerSpec, default_candidate_grid, design_lqr,
                         inner_evaluate)
from .dependability import (DemandSet, StructureFunction, fit_reliability_regression,
                            performance_reliability)
from .plant import PlantModel, discretize, double_integrator, inverted_pendulum
from .sim_engine import EpisodeConfig, KpiVector, X0Sampler, monte_carlo, run_episode

__version__ = "0.1.0"
