"""
From segment scores to per-turn rewards
=======================================

A four-segment successful episode, pushed through modulation, grounding
fusion and turn placement by hand.
"""

import numpy as np

from hisr import credit, vocab
from hisr.trajectory import Segmentation, Trajectory, Turn

# Scores from a segment reward model: the last segment claims most of the outcome.
r_hat = np.array([0.069, 0.118, 0.132, 0.681])
# Importance of each segment, already normalised to sum to one.
z_hat = np.array([0.127, 0.392, 0.286, 0.195])

unit = credit.modulate(r_hat, z_hat, "unit")
print("modulated (unit):", np.round(unit.values, 3))
# The second segment now outranks the third.
print("rank before:", np.argsort(-r_hat) + 1, "after:", np.argsort(-unit.values) + 1)

# In outcome mode the shares are rescaled by the episode outcome.
print("modulated (R=1): ", np.round(credit.modulate(r_hat, z_hat, "outcome", 1.0).values, 3))
print("modulated (R=0): ", credit.modulate(r_hat, z_hat, "outcome", 0.0).values)

# %%
# Grounding. Build a six-turn episode where turn 3 was a wasted action.
acts = ["go fridge", "open fridge", "look", "take apple fridge", "go countertop", "put apple countertop"]
grounded = [True, True, False, True, True, True]
t = Trajectory("demo", tuple(Turn((vocab.ID["AT"],), vocab.ids(a), g) for a, g in zip(acts, grounded)), 1.0)
seg = Segmentation(((1, 2), (3, 3), (4, 4), (5, 6)))

fused = credit.fuse_grounding(unit, t, seg, alpha=0.3)
print("grounded fraction:", fused.grounding)
print("fused:", np.round(fused.values, 3))

# %%
# Each segment's reward lands on its final turn; everything else gets zero.
turn = credit.to_turn_rewards(fused, seg, t.m)
for a, r in zip(acts, turn):
    print(f"  {a:<20s} {r:+.3f}")
print("total preserved:", np.isclose(turn.sum(), fused.values.sum()))
