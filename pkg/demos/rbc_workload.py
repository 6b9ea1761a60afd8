"""Randomized block-coordinate updates versus full updates over the 300 s benchmark.

One block of the 73-coordinate cyber state (one of 39 blocks, drawn
uniformly) moves per 0.6 ms step. The script compares the RBC trajectory
with the continuous-update loop and tabulates how many coordinates each
writes. Takes about 10 s.

    python demos/rbc_workload.py [seed]
"""

import sys

import numpy as np

from freqnet import builtin_scenario, run_continuous, run_rbc
from freqnet.report import expected_workload, format_workload, workload_from_meta

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
scenario = builtin_scenario()

cont = run_continuous(scenario)
rbc = run_rbc(scenario, seed=seed)

full, expected = expected_workload(scenario.horizon, scenario.rbc.epsilon, scenario.rbc.partition)
print(format_workload([full, expected, workload_from_meta(rbc.meta)]))
print("(rows: full update at the RBC period, RBC expectation, RBC observed)\n")

# both traces sample every 0.03 s here; align on the common instants
t_common = np.intersect1d(np.round(cont.t, 9), np.round(rbc.t, 9))
ic = np.searchsorted(np.round(cont.t, 9), t_common)
ir = np.searchsorted(np.round(rbc.t, 9), t_common)
gap = np.abs(rbc.u[ir] - cont.u[ic]).max(axis=1) * scenario.base_mva
for lo, hi in ((0, 5), (5, 10), (10, 20), (20, 100), (100, 300)):
    sel = (t_common >= lo) & (t_common <= hi)
    print(f"max |u_rbc - u_cont| over [{lo:3d}, {hi:3d}] s: {gap[sel].max():.4f} MW")
print(f"terminal gap: {gap[-1]:.2e} MW")
