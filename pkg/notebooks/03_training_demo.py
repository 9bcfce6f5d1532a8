"""
A short training run with group supervision
===========================================

Trains the desk network for a few epochs on phantoms and prints the epoch
trace.  This is a demonstration budget, far below the acceptance schedule,
so the numbers are only indicative.
"""

import numpy as np

from gradseg.losses import LossConfig
from gradseg.net import SupervisionScheme, unet
from gradseg.phantom import PhantomSpec, make_dataset
from gradseg.pipeline import SamplerConfig, StageConfig, TrainConfig, predict, prepare_dataset, segment, train

items = prepare_dataset(make_dataset(PhantomSpec(), 6))
train_items, test_items = items[:5], items[5:]

stage = StageConfig(4, 0.1, (3,), "general_union", LossConfig(alpha=0.1), 0.7)
cfg = TrainConfig((stage,), seed=0, sampler=SamplerConfig((32, 32, 32), 0.5, 4))
res = train(unet(), SupervisionScheme("groups", 2), train_items, cfg, test_items, log=print)

last = res.trace[-1]
print(f"\nprecision {last['precision']:.3f}, length detected {last['length_detected']:.3f}, "
      f"thin-stratum length {last['thin_length_detected']:.3f}")

# sliding-window inference on the held-out volume
prob = predict(res.net, test_items[0].image, patch=(32, 32, 32), stride=(16, 16, 16))
seg = segment(prob)
print(f"predicted foreground {np.asarray(seg).mean():.2%}")
