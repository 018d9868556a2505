"""
Energy along the latent flow
============================

The bracket vector field is orthogonal to the state, so the quadratic energy
is a constant of the exact flow. A discrete integrator only keeps it up to
its order; halving the step shows how fast the drift goes away.
"""
import numpy as np

from bracketgnn.attention import AttentionParams
from bracketgnn.dynamics import FlowConfig, LatentState, energy, integrate, vector_field
from bracketgnn.synthetic import delaunay_graph

rng = np.random.default_rng(0)
graph = delaunay_graph(rng.uniform(size=(30, 2)))
params = AttentionParams(0.5 * rng.standard_normal((2, 4, 3)), 0.5 * rng.standard_normal((2, 4, 3)))
x = LatentState(rng.standard_normal((30, 3)), rng.standard_normal((graph.num_edges, 3)))

# the rate is orthogonal to the state, up to round-off
rate = vector_field(x, params, graph)
print("<x, f(x)> =", np.sum(x.q * rate.q) + np.sum(x.p * rate.p))

e0 = energy(x)
print(f"\n{'steps':>6} {'euler drift':>14} {'abm drift':>14}")
for n in (2, 4, 8, 16, 32):
    drift = [abs(energy(integrate(x, params, graph, FlowConfig(n_steps=n, method=m))) - e0) / e0
             for m in ("forward-euler", "implicit-abm")]
    print(f"{n:>6} {drift[0]:>14.3e} {drift[1]:>14.3e}")

# Euler drift halves with the step; the Adams-Moulton corrector gains
# roughly a factor of eight per halving.
