"""PGD against an MLP Q-function on GridWorld, next to the tree-search certificate.

The MLP is fit to the value-iteration table, so it is differentiable and PGD
can follow the margin gradient of the smoothed policy.
"""

import numpy as np

from rlcert.attack import AttackConfig, pgd_attack_episode
from rlcert.cert_local_reward import certify
from rlcert.env import GridWorld
from rlcert.qfunc import fit_mlp, value_iteration_table
from rlcert.smoothing import SmoothingConfig, estimate_range

env = GridWorld(5)
model = env.tabular_model()
table = value_iteration_table(model, 0.9)
centers = np.array([[0.5 * (e[i - 1] + e[i]) for e, i in zip(model.cell_edges, c)] for c in model.cell_of_state])
q = fit_mlp(centers, table, hidden=96, seed=0)
lo, hi = estimate_range(env, q, 5, seed=0)
cfg = SmoothingConfig(sigma=0.1, m=10_000, v_min=lo, v_max=hi)

env.place((2, 2))
cert = certify(env, q, cfg, H=6)
print("   eps   bound  PGD return (smoothed)  PGD return (raw)")
for eps in (0.0, 0.02, 0.05, 0.1, 0.2, 0.4):
    rets = []
    for target in ("smoothed", "raw"):
        env.place((2, 2))
        rets.append(pgd_attack_episode(env, q, AttackConfig(eps, target=target, grad_samples=128), cfg, H=6).ret)
    print(f" {eps:.3f}  {cert.bound_at(eps):5.1f}  {rets[0]:21.1f}  {rets[1]:.1f}")
