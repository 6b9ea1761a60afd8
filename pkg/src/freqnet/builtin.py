"""Embedded IEEE 14-bus benchmark.

Susceptances come from the public 14-bus branch reactances through
``b = 1 / (x * tap)``; the three transformers 4-7, 4-9 and 5-6 carry tap
ratios 0.978, 0.969 and 0.932. Buses 1-5 form area 1 and buses 6-14 area 2,
so the single tie row aggregates the corridors 4-7, 4-9 and 5-6.

The slack unit at bus 1 is not controllable; its base-case output (total
load minus the 40 MW of the bus-2 unit) enters as a negative demand, so the
pre-disturbance equilibrium has ``u = u_ref`` and an 87.7 MW export.
"""

IEEE14_REACTANCE = (
    # from, to, x [pu], tap
    (1, 2, 0.05917, 1.0), (1, 5, 0.22304, 1.0), (2, 3, 0.19797, 1.0),
    (2, 4, 0.17632, 1.0), (2, 5, 0.17388, 1.0), (3, 4, 0.17103, 1.0),
    (4, 5, 0.04211, 1.0), (4, 7, 0.20912, 0.978), (4, 9, 0.55618, 0.969),
    (5, 6, 0.25202, 0.932), (6, 11, 0.19890, 1.0), (6, 12, 0.25581, 1.0),
    (6, 13, 0.13027, 1.0), (7, 8, 0.17615, 1.0), (7, 9, 0.11001, 1.0),
    (9, 10, 0.08450, 1.0), (9, 14, 0.27038, 1.0), (10, 11, 0.19207, 1.0),
    (12, 13, 0.19988, 1.0), (13, 14, 0.34802, 1.0),
)

IEEE14_LOAD_MW = {2: 21.7, 3: 94.2, 4: 47.8, 5: 7.6, 6: 11.2, 9: 29.5, 10: 9.0,
                  11: 3.5, 12: 6.1, 13: 13.5, 14: 14.9}

IEEE14_CASE = """\
# IEEE 14-bus, DC susceptances on a 100 MVA base
[system]
base_mva 100

[bus]
1
2
3
4
5
6
7
8
9
10
11
12
13
14

[branch]
# from to susceptance_pu
1 2 16.9004563123
1 5 4.48350071736
2 3 5.0512703945
2 4 5.67150635209
2 5 5.75109270761
3 4 5.84692743963
4 5 23.7473284256
4 7 4.88951266032
4 9 1.85549955782
5 6 4.25744533525
6 11 5.02765208648
6 12 3.90915132325
6 13 7.67636447379
7 8 5.67697984672
7 9 9.09008271975
9 10 11.8343195266
9 14 3.69849840965
10 11 5.20643515385
12 13 5.00300180108
13 14 2.87339808057

[gen]
2
3
6
8

[area]
1 1
2 1
3 1
4 1
5 1
6 2
7 2
8 2
9 2
10 2
11 2
12 2
13 2
14 2

[tie]
1 2
"""

IEEE14_SCENARIO = """\
[network]
case = ieee14

[dispatch]
Q = 3, 5, 6, 7
u_ref = 40, 0, 0, 0
u_lo = 0
u_hi = 100
# bus 1 carries the fixed slack output (259 MW load - 40 MW at bus 2)
d = -219, 21.7, 94.2, 47.8, 7.6, 11.2, 0, 0, 29.5, 9.0, 3.5, 6.1, 13.5, 14.9
P_sch = 87.7
flow_margin = 80
f_hi = 2-4: 55.65

[plant]
inertia = 0.2
damping = 0.05

[controller]
# tuned for explicit stepping at 0.6 ms and 39-block RBC (see README)
kappa = 1.0
tau_u = 0.5
tau_phi = 30
tau_lambda = 0.07
tau_pi = 0.15
tau_rho = 0.02
init = warm

[channel]
eta = 1.0
delay_down_ms = 11
delay_up_ms = 11
filter = off
zeta_u_ms = 10
zeta_omega_ms = 20

[rbc]
enabled = off
epsilon = 0.0006
seed = 0
partition = default
probs = uniform

[disturbance]
events = 5.0 4 3.6; 5.0 5 2.4

[sim]
horizon = 300
record_every = 50
"""
