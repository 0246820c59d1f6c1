"""Expectation and percentile lower bounds on the return from randomized rollouts.

Both bounds start from a sample of sigma-noised episodes and degrade with the
attack budget eps.  The expectation bound pays a Lipschitz penalty linear in
eps and soon drops below the lowest possible return; the percentile bound
falls to the return floor and disappears once p' is too small for m.
"""

import numpy as np

from rlcert.cert_global import certify_global, sample_randomized_trajectories
from rlcert.env import ToyFreeway
from rlcert.qfunc import value_iteration

env = ToyFreeway()
q = value_iteration(env.tabular_model(), 0.9)
sigma = 0.2
env.reset(0)
tr = sample_randomized_trajectories(env, q, sigma, 10_000, seed=0)
print(f"sigma={sigma}, m={tr.m}, H={tr.H}: sample mean {tr.returns.mean():.3f}, median {np.median(tr.returns)}\n")

print("   eps   p'      k     J_E      J_p")
for g in certify_global(tr, env.spec, np.linspace(0, 0.2, 9), p=0.5, alpha=0.05):
    jp = "none" if g.percentile_bound is None else f"{g.percentile_bound:.3f}"
    print(f" {g.epsilon:.3f}  {g.p_prime:.4f}  {g.order_index}  {g.expectation_bound:7.3f}  {jp}")
