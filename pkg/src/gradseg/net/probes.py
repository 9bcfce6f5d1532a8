"""Diagnostics on trained or toy nets: attention maps and gradient erosion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .model import Net


def attention_map(t) -> np.ndarray:
    """Channel sum of absolute values, rescaled to [0, 1] by its maximum."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t).sum(axis=0) if t.ndim == 4 else np.abs(t)
    peak = a.max() if a.size else 0.0
    return a / peak if peak > 0 else np.zeros_like(a)


def attention_probe(net: Net) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Output and gradient attention of every block after forward + backward.

    Blocks that received no gradient get an all-zero map.
    """
    if not hasattr(net, "outputs") or not hasattr(net, "block_grads"):
        raise RuntimeError("attention_probe needs a completed forward and backward pass")
    outs = [attention_map(f) for f in net.outputs]
    grads = [
        attention_map(b.g_fb) if getattr(b, "g_fb", None) is not None else np.zeros(f.shape[1:])
        for f, b in zip(net.outputs, net.blocks)
    ]
    return outs, grads


def fg_bg_ratio(g, fg) -> float:
    """Mean |g| over foreground divided by mean |g| over background."""
    a = np.abs(g)
    bg = a[~fg].mean()
    return float(a[fg].mean() / bg) if bg > 0 else float("inf")


@dataclass
class ProbeTrace:
    ratio: list[float]  # signed fg/bg ratio after each layer, index 0 = seed
    abs_ratio: list[float]  # mean |g| ratio
    shell_ratio: list[float]  # background shell next to fg vs far background


def seed_gradient(fg, ratio: float) -> np.ndarray:
    """Loss-like seed: ``-ratio`` on foreground (push up), ``+1`` on background."""
    fg = np.asarray(fg, dtype=bool)
    return np.where(fg, -float(ratio), 1.0)


def erosion_dilation_probe(kernels, seed, fg) -> ProbeTrace:
    """Propagate ``seed`` backward through linear 'same' convolutions.

    The backward pass of a cross-correlation with kernel ``k`` is a
    convolution with ``k``, with zero padding at the borders.  After each
    layer three numbers are recorded:

    * ``ratio``: -mean(g on fg) / mean(g on bg).  The sign convention keeps
      the seed's "foreground wants up, background wants down" reading; mixing
      with background drives it down (erosion).
    * ``abs_ratio``: the same with absolute values.
    * ``shell_ratio``: -mean(g on the background voxels 26-adjacent to fg) /
      mean(g on the remaining background).  It starts at -1 and turns
      positive once foreground gradient spills into the neighbourhood
      (dilation).
    """
    fg = np.asarray(fg, dtype=bool)
    g = np.asarray(seed, dtype=np.float64)
    shell = ndi.binary_dilation(fg, np.ones((3, 3, 3), bool)) & ~fg
    far = ~fg & ~shell

    def record(t, g):
        t.ratio.append(float(-g[fg].mean() / g[~fg].mean()))
        t.abs_ratio.append(fg_bg_ratio(g, fg))
        t.shell_ratio.append(float(-g[shell].mean() / g[far].mean()))

    trace = ProbeTrace([], [], [])
    record(trace, g)
    for k in kernels:
        g = ndi.convolve(g, np.asarray(k, dtype=np.float64), mode="constant", cval=0.0)
        record(trace, g)
    return trace


def averaging_kernels(depth: int, size: int = 3) -> list[np.ndarray]:
    return [np.full((size,) * 3, 1.0 / size**3) for _ in range(depth)]
