"""Secondary frequency control over delayed communication links.

A projected primal-dual dispatch optimizer drives a linearized multi-area
swing model through a wave-variable (scattering) channel with constant
delays, optionally with wave-domain low-pass filters and randomized
block-coordinate updates of the cyber state.

Submodules
----------
network     case parsing and incidence, Laplacian, tie matrices
dispatch    economic dispatch problem, KKT residuals and active-set oracle
plant       swing dynamics and plant storage
controller  projected primal-dual optimizer
interface   wave encoding, decoding and the delayed channel
rbc         block partitions and randomized block-coordinate steps
sim         closed-loop simulator and monitors
scenario    INI scenario files and the built-in IEEE 14-bus scenario
"""

from freqnet.dispatch import DispatchProblem, KKTPoint, kkt_residual, solve_dispatch_oracle
from freqnet.scenario import ScenarioConfig, ScenarioError, builtin_scenario, load_scenario
from freqnet.sim import SimTrace, SimulationDiverged, run_closed_loop, run_continuous, run_rbc

__version__ = "0.1.0"

__all__ = [
    "DispatchProblem",
    "KKTPoint",
    "kkt_residual",
    "solve_dispatch_oracle",
    "ScenarioConfig",
    "ScenarioError",
    "builtin_scenario",
    "load_scenario",
    "SimTrace",
    "SimulationDiverged",
    "run_closed_loop",
    "run_continuous",
    "run_rbc",
]
