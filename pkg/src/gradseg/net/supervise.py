"""Group-supervised objective: per-group losses and accumulated gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import losses
from .model import Net, SupervisionScheme


@dataclass
class Sample:
    """One training patch.

    ``dist`` is the foreground distance to the centerline divided by its
    maximum (0 on background); it is needed by the distance-weighted losses.
    """

    x: np.ndarray
    gt: np.ndarray
    dist: np.ndarray | None = None


def loss_weights(kind: str, gt, dist, cfg: losses.LossConfig):
    """Per-voxel weight map a loss kind expects, or None."""
    g = np.asarray(gt) > 0
    if kind in ("general_union", "prior_tversky"):
        if dist is None:
            raise losses.LossError(f"{kind} needs a centerline distance map")
        rel = np.clip(np.asarray(dist, dtype=np.float64), 0.0, 1.0) ** cfg.distance_root
        return np.where(g, 1.0 - cfg.magnitude * rel, 1.0)
    if kind == "weighted_dice":
        return np.where(g, cfg.fg_weight, 1.0)
    return None


def group_configs(net: Net, scheme: SupervisionScheme, cfg: losses.LossConfig) -> list[losses.LossConfig]:
    """Loss config of each output group, in ``net.order``."""
    return [cfg.with_(alpha=scheme.alpha_for(net.spec, g, cfg.alpha)) for g in net.order]


def forward_backward(
    net: Net,
    scheme: SupervisionScheme,
    batch: list[Sample],
    kind: str,
    cfg: losses.LossConfig | None = None,
    training: bool = True,
    rng=None,
) -> list[float]:
    """Run every sample forward and backward; return the mean loss per group.

    Gradients accumulate into the net's buffers (call ``net.zero_grad`` first).
    The total objective is the sum of the group losses scaled by the scheme's
    loss weights.
    """
    cfg = cfg or losses.LossConfig()
    cfgs = group_configs(net, scheme, cfg)
    lw = scheme.weights(len(net.order))
    totals = np.zeros(len(net.order))
    for s in batch:
        probs = net.forward(s.x, training=training, rng=rng)
        grads = []
        for k, (p, c, w) in enumerate(zip(probs, cfgs, lw)):
            res = losses.evaluate(kind, p, s.gt, loss_weights(kind, s.gt, s.dist, c), c)
            if not np.isfinite(res.value):
                raise FloatingPointError(f"non-finite loss in group {net.order[k]}")
            totals[k] += res.value
            grads.append(None if w == 0 else w * res.gradient)
        net.backward(grads)
    return list(totals / max(len(batch), 1))


def total_loss(net: Net, scheme: SupervisionScheme, sample: Sample, kind: str, cfg=None) -> float:
    """Weighted objective of one sample without touching gradient buffers."""
    cfg = cfg or losses.LossConfig()
    probs = net.forward(sample.x, training=False)
    out = 0.0
    for p, c, w in zip(probs, group_configs(net, scheme, cfg), scheme.weights(len(net.order))):
        if w:
            out += w * losses.evaluate(kind, p, sample.gt, loss_weights(kind, sample.gt, sample.dist, c), c).value
    return out
