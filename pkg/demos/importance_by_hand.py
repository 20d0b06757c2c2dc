"""
Turn importance from two likelihoods
====================================

Importance compares how likely an action is once the outcome is known
against how likely the acting policy found it.
"""

import numpy as np

from hisr import hindsight
from hisr.trajectory import Segmentation

# Same per-token probabilities: the hindsight view adds nothing, z is one.
p = np.log([0.4, 0.25])
print("equal:", hindsight.importance_from_logprobs(p, p, beta=0.3)[0])

# Every token 0.3 nats more likely in hindsight: with beta 0.3 that is e.
print("boosted:", hindsight.importance_from_logprobs(p + 0.3, p, beta=0.3)[0], "vs e =", np.e)
print("damped: ", hindsight.importance_from_logprobs(p - 0.3, p, beta=0.3)[0], "vs 1/e =", 1 / np.e)

# %%
# Temperature. Halving beta squares z, so small beta sharpens the contrast.
for beta in (1.0, 0.6, 0.3, 0.15):
    z, _ = hindsight.importance_from_logprobs(p + 0.2, p, beta)
    print(f"beta {beta:<5} z {z:8.4f}")

# A 50-nat gap is clipped to 20 before scaling, so z stays finite.
z, _ = hindsight.importance_from_logprobs(np.array([0.0]), np.array([-50.0]), 0.3)
print("clipped:", z, "=", np.exp(20 / 0.3))

# %%
# Per-turn scores pool into segments and are normalised.
z_turn = np.array([1.1, 0.9, 3.0, 0.5, 1.5])
seg = Segmentation(((1, 2), (3, 3), (4, 5)))
print("segment importance:", np.round(hindsight.segment_importance(z_turn, seg), 3))
