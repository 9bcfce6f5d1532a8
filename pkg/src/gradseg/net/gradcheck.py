"""Finite-difference spot checks of the whole network gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import losses
from .model import Net, SupervisionScheme
from .supervise import Sample, forward_backward, total_loss


@dataclass
class GradCheckResult:
    names: list[str]  # "param[flat index]" of every probed entry
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def net_gradient_check(
    net: Net,
    scheme: SupervisionScheme,
    sample: Sample,
    kind: str = "tversky",
    cfg: losses.LossConfig | None = None,
    n_params: int = 100,
    h: float = 1e-6,
    floor: float = 1e-4,
    seed: int = 0,
) -> GradCheckResult:
    """Compare ``net``'s analytic gradient with central differences.

    The analytic side runs in the net's own precision; the numeric side runs
    on a float64 copy so that ``h`` can be small.  Relative errors use the
    denominator ``max(|a|, |n|, floor * max|a|)``: entries whose true gradient
    is zero (a conv bias feeding instance normalisation) otherwise measure
    pure rounding noise.
    """
    cfg = cfg or losses.LossConfig()
    net.zero_grad()
    forward_backward(net, scheme, [sample], kind, cfg, training=False)
    slots = net.named_params()
    sizes = np.array([layer.params[k].size for _, layer, k in slots])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False))

    ref = net.astype(np.float64)
    sample64 = Sample(np.asarray(sample.x, np.float64), sample.gt, sample.dist)
    ref_params = ref.params()
    names, ana, num = [], [], []
    for flat in picks:
        s = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[s])
        name, layer, k = slots[s]
        ana.append(float(layer.grads[k].ravel()[j]))
        p = ref_params[s].reshape(-1)
        old = p[j]
        p[j] = old + h
        up = total_loss(ref, scheme, sample64, kind, cfg)
        p[j] = old - h
        down = total_loss(ref, scheme, sample64, kind, cfg)
        p[j] = old
        num.append((up - down) / (2 * h))
        names.append(f"{name}[{j}]")
    ana, num = np.array(ana), np.array(num)
    scale = floor * max(np.abs(ana).max(initial=0.0), 1e-30)
    rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), scale)
    return GradCheckResult(names, ana, num, rel)
