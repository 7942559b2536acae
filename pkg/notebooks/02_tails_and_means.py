"""
Return-time tails, means and the induced Ulam operator
======================================================

At alpha = 0.5, b = 0.5 the invariant measure is finite and the general
return tail decays like n^-2.
"""

import warnings

import numpy as np

from afnlab.cli import Experiment, load_config
from afnlab.tails import check_H1, fit_tail

warnings.simplefilter("ignore")
exp = Experiment(load_config(None, {"alpha": 0.5, "b": 0.5}))

# %%
# The induced Ulam operator is row-stochastic with a spectral gap.
op, h = exp.induced
print("cells:", op.grid.cells, " gap:", op.spectral_gap()[2])
print("density range:", h.weights.min(), h.weights.max())

# %%
# Tail of the general return time and its two-stage power-law fit.
tp = exp.tail_phi
fit = fit_tail(tp, (20, 500), beta_ref=exp.params.beta)
print(fit.to_json())

# %%
# Means of the three return times and the identity that links them.
md = exp.means
print("phi_bar:", md.phi_bar, " tau_bar:", md.tau_bar, " rho_bar:", md.rho_bar)
print("identity gap:", md.identity_gap)

# %%
# The reinduce ratio stays bounded along the tail.
rep = check_H1(exp.schedule, exp.mu0, 1000)
print("sup ratio:", rep.sup, " trend slope:", rep.trend_slope)
print("first ratios:", np.round(rep.ratios[:8], 4))
