"""
Foreground/background gradient ratios of the region losses
===========================================================

Every loss here is a function of the whole prediction, so a voxel's gradient
depends on the others.  What matters for thin structures is how strongly a
foreground voxel is pulled up compared with how strongly a background voxel
is pushed down.  We sweep the loss value on a class-uniform field and print
the ratio for each loss next to its closed form and its lower bound.
"""

import numpy as np

from gradseg import losses
from gradseg.losses import LossConfig

rng = np.random.default_rng(0)

# a sparse foreground, like a peripheral airway patch
gt = np.zeros((16, 16, 16))
gt[7:9, 7:9, :] = 1
fg = gt > 0
print(f"foreground fraction {fg.mean():.3f}")

cfg = LossConfig(alpha=0.1)
print(f"alpha {cfg.alpha}, root {cfg.root}, m {cfg.magnitude:.3f}")

# GUL weights: 1 on the centreline, 1 - m on the wall
weights = np.where(fg, 1.0 - cfg.magnitude * rng.uniform(0, 1, gt.shape), 1.0)

kinds = ["dice", "tversky", "root_tversky", "general_union", "prior_tversky"]
print(f"\n{'p_fg':>6} " + " ".join(f"{k:>14}" for k in kinds))
for p_fg in (0.1, 0.3, 0.5, 0.7, 0.9):
    pred = np.where(fg, p_fg, 0.05)
    row = []
    for k in kinds:
        w = weights if k in ("general_union", "prior_tversky") else None
        rep = losses.gradient_ratio(k, pred, gt, w, cfg)
        row.append(rep.empirical_ratio)
    print(f"{p_fg:6.1f} " + " ".join(f"{r:14.3f}" for r in row))

# Dice keeps the ratio near 1 when the loss is low; Tversky with a small alpha
# keeps it far above 1.  The bound below is what each loss guarantees.
print("\nlower bounds")
for k in kinds:
    w = weights if k in ("general_union", "prior_tversky") else None
    print(f"  {k:14s} {losses.lower_bound(k, cfg, w, gt):8.3f}")

# the empirical ratio agrees with the formula computed from the loss value
pred = np.where(fg, 0.6, 0.2)
for k in kinds:
    w = weights if k in ("general_union", "prior_tversky") else None
    rep = losses.gradient_ratio(k, pred, gt, w, cfg)
    print(f"  {k:14s} empirical {rep.empirical_ratio:10.6f}  closed form {rep.closed_form_ratio:10.6f}")
