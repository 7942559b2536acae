"""
The map, its orbit lattice and the inducing scheme
==================================================

Walks through f(x) = x(1 + b x^alpha) mod 1 at alpha = 1, b = 1, where the
critical point is the golden ratio and the whole orbit of 1 sits at 0.
"""

import math

import numpy as np

from afnlab.afn_map import Branch, MapParams, eval_map, invert_branch, iterate
from afnlab.inducing import build_lattice, build_schedule, first_return_time

p = MapParams(1.0, 1.0)
print("e0 =", p.e0, " golden ratio - 1 =", (math.sqrt(5.0) - 1.0) / 2.0)

# %%
# The left branch fixes 0 with derivative 1; the right branch wraps at e0.
x = np.linspace(0.0, 1.0, 9)
print(np.c_[x, eval_map(p, x)])
print("left preimage of e0:", invert_branch(p, Branch.LEFT, p.e0))

# %%
# Lattice points x_n are the left preimages of e0.  They approach 0 like
# n^(-1/alpha), which is the source of the polynomial tails.
lat = build_lattice(p, 3000, 6)
n = np.arange(100, 3001)
print("decay exponent of x_n:", np.polyfit(np.log(n), np.log(lat.x[n]), 1)[0])
print("sigma:", lat.sigma, " tau at 1:", lat.tau_at_1)

# %%
# First returns to Y = [e0, 1] agree with brute-force iteration.
y = np.linspace(p.e0 + 0.01, 0.99, 5)
print("first return times:", first_return_time(p, lat, y))
print("visits for y = 0.9:", iterate(p, 0.9, 6, record=True)[1])

# %%
# The inducing scheme cuts Y into cells with a reinduce count rho and a
# general return time phi; each cell maps onto Y.
s = build_schedule(p, lat, 1000)
print("cells:", len(s), " uncovered length:", s.uncovered)
for c in range(3):
    print(s.left[c], s.right[c], s.rho[c], s.phi[c], s.tau_seq(c))
