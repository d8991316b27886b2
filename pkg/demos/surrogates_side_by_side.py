"""
Compare the four clipped policy objectives on the same one-token batch.

With a single token per response the token ratio, the sequence ratio and the
geometric mean ratio coincide, so the differences below come only from the
clip windows each method uses by default.
"""

import numpy as np

from clipo import objectives as obj

RATIOS = np.array([0.5, 0.7, 0.9, 1.0, 1.1, 1.3, 1.6])
METHODS = ("grpo", "dapo", "gspo", "gmpo")

for adv in (1.0, -1.0):
    print(f"\nadvantage {adv:+.0f}: objective per ratio (higher is better for the policy)")
    print("ratio   " + "  ".join(f"{m:>7}" for m in METHODS))
    for r in RATIOS:
        vals = []
        for m in METHODS:
            cfg = obj.SurrogateConfig.for_method(m, kl_coef=0.0)
            new = np.log([[r]])
            old = np.zeros((1, 1))
            mask = np.ones((1, 1), dtype=bool)
            # surrogate_loss returns the loss to minimise, so negate it
            vals.append(-obj.surrogate_loss(cfg, new, old, np.array([adv]), mask).item())
        print(f"{r:5.2f}   " + "  ".join(f"{v:7.4f}" for v in vals))

# Clip windows behind the table above.
for m in METHODS:
    cfg = obj.SurrogateConfig.for_method(m)
    print(f"{m}: eps_low {cfg.eps_low:g}, eps_high {cfg.eps_high:g}, kl_coef {cfg.kl_coef:g}")

# Longer responses: the sequence ratio is the geometric mean of the token ratios.
new = np.log([[1.2, 0.8, 1.5]])
old = np.zeros((1, 3))
mask = np.ones((1, 3), dtype=bool)
print("token ratios   ", np.round(obj.token_ratios(new, old, mask).data, 4))
print("sequence ratio ", np.round(obj.sequence_ratios(new, old, mask).data, 4))
