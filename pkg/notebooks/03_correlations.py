"""
Decay of correlations in the finite and infinite regimes
========================================================

Finite case: the Ulam matrix of f gives rho_n, compared with the leading
term built from the return tail and with a Monte Carlo time average.
Infinite case: observables on Y are carried by the first-return tower and
n^(1 - beta) rho_n approaches sin(pi beta) / pi after normalisation.
"""

import warnings

import numpy as np

from afnlab import cli

warnings.simplefilter("ignore")

# %%
fin = cli.Experiment(cli.load_config(None, {"alpha": 0.5, "b": 0.5}))
table, summary = cli.correlate_finite(fin)
n, rho, lead = table[0], table[1], table[2]
for k in (20, 50, 100, 300):
    print(k, rho[k], lead[k], rho[k] / lead[k])
print("slope:", summary["slope"], " target:", summary["slope_target"])
print("Monte Carlo z-scores:", [round(float(z), 3) for z in summary["montecarlo"]["z"]])

# %%
# A shorter infinite run than the acceptance suite: depth and n_max 3000.
inf = cli.Experiment(cli.load_config(None, {"alpha": 1.5, "b": 0.5, "depth_n": 30000, "depth_k": 8,
                                            "phi_cap": 30000, "grid_cells": 256, "n_max": 3000,
                                            "tau_cap": 3000}))
table, summary = cli.correlate_infinite(inf)
trend = table[5]
for k in (100, 300, 1000, 3000):
    print(k, trend[k])
print("d0:", summary["d0"], " slope:", summary["slope"], " target:", summary["slope_target"])
