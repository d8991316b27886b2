"""
Walk through the contrastive reward on one small group, by hand and then with the library.

A group of four rollouts answers the same prompt. Two are correct. Each correct
rollout becomes an anchor, its correct sibling is the positive, and every
rollout in the group sits in the denominator. The anchor loss is scaled by
lambda, negated and floored, then added to the verifier reward before the
usual group normalisation.
"""

import math

import numpy as np

from clipo import contrastive as cl
from clipo import objectives as obj

# === THE HAND CASE ===

# Unit embeddings: rollouts 0 and 1 agree, 2 is orthogonal, 3 points the other way.
E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
REWARDS = [1, 1, 0, 0]
TAU, LAM = 0.5, 0.2

# By hand: similarities of anchor 0 are (2, 2, 0, -2) after dividing by tau.
row = (E @ E.T / TAU)[0]
by_hand = -(row[1] - math.log(sum(math.exp(v) for v in row)))
print(f"InfoNCE by hand          {by_hand:.10f}")

sim = cl.similarity_matrix(E, TAU)
print(f"InfoNCE from the library {cl.infonce_anchor_loss(sim, 0, 1).item():.10f}")

cfg = cl.ContrastiveConfig(tau=TAU, lam=LAM)
shaped = cl.contrastive_rewards(REWARDS, E, cfg, np.random.default_rng(0))
print("contrastive rewards     ", np.round(shaped.contrastive, 6))
print("shaped rewards          ", np.round(shaped.total, 6))
print("MI lower bound ln G - L  ", round(cl.mi_lower_bound(by_hand, 4), 6))

# === WHY THE FLOOR EXISTS ===

# Identical embeddings carry no information: every anchor loss is exactly ln G.
for G in (4, 16, 32):
    same = np.tile([[0.6, 0.8]], (G, 1))
    loss = cl.infonce_anchor_loss(cl.similarity_matrix(same, 0.05), 0, 1).item()
    print(f"G={G:>2}: loss {loss:.6f}  ln G {math.log(G):.6f}  -lambda*loss {-LAM * loss:+.4f}")

# At G=16 the raw penalty (-0.5545) would outweigh a large part of the verifier
# reward, so it is floored at -0.5.
G16 = cl.contrastive_rewards([1] * 8 + [0] * 8, np.tile([[1.0, 0.0]], (16, 1)), cl.ContrastiveConfig(lam=LAM), np.random.default_rng(0))
print("G=16 identical group, contrastive part of correct rollouts:", G16.contrastive[:8])

# === EFFECT ON ADVANTAGES ===

# In the hand case both correct rollouts receive the same penalty, so it
# cancels inside the group normalisation. It matters when correct rollouts
# differ: here rollout 2 is correct but far from the other two.
E6 = np.array([[1.0, 0.0], [0.98, 0.2], [-0.6, 0.8], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]])
E6 /= np.linalg.norm(E6, axis=1, keepdims=True)
R6 = [1, 1, 1, 0, 0, 0]
# SoftNN scores each anchor against all its correct partners at once, so the
# outlier is the only rollout pushed to the floor.
cfg6 = cl.ContrastiveConfig(tau=TAU, lam=LAM, loss_kind="softnn")
shaped6 = cl.contrastive_rewards(R6, E6, cfg6, np.random.default_rng(0))
print("contrastive rewards       ", np.round(shaped6.contrastive, 4))
print("advantages, verifier only ", np.round(obj.group_advantages(np.array(R6, dtype=float)).advantages, 4))
print("advantages, shaped        ", np.round(obj.group_advantages(shaped6).advantages, 4))

# Groups with one or no correct rollouts, or all correct, are left alone.
for r in ([1, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]):
    print(r, "->", cl.contrastive_rewards(r, E, cfg, np.random.default_rng(0)).contrastive)
