"""Absolute return bounds by adaptive tree search, checked against attacks.

The certificate is a step function of eps: each entry marks the budget at
which a new action becomes reachable somewhere in the tree and the worst
return drops.  Random sphere attacks on the smoothed policy never go below it.
"""

from rlcert.attack import AttackConfig, random_attack_episode
from rlcert.cert_local_reward import certify
from rlcert.env import ToyFreeway
from rlcert.qfunc import value_iteration
from rlcert.smoothing import SmoothingConfig, estimate_range

env = ToyFreeway()
q = value_iteration(env.tabular_model(), 0.9)
lo, hi = estimate_range(env, q, 5, seed=0)
cfg = SmoothingConfig(sigma=0.2, v_min=lo, v_max=hi)

env.reset(0)
cert = certify(env, q, cfg, eps_max=0.2, exact=True, enable_pruning=True)
print(f"nodes expanded {cert.stats.nodes_expanded}, complete={cert.stats.complete}\n")
print("certificate entries (eps, lower bound):")
for eps, bound in cert.entries:
    print(f"  {eps:.5f}  {bound}")

print("\n   eps   bound  attacked return")
for eps in (0.0, 0.01, 0.02, 0.05, 0.1, 0.2):
    env.reset(0)
    res = random_attack_episode(env, q, AttackConfig(eps, trials=64, seed=1), cfg, exact=True)
    print(f" {eps:.3f}  {cert.bound_at(eps):5.1f}  {res.ret}")
