"""Union-family segmentation losses with analytic gradients.

Every loss maps a probability field ``pred`` and a binary ground truth ``gt``
(any matching shape) to a :class:`LossResult` holding the scalar value and the
per-voxel derivative with respect to ``pred``.  Computation always runs in
float64.

The family is built on one weighted core,

    U = 1 - sum(w * p**r * g) / sum(w * (alpha * p + beta * g)),

which gives Tversky (w = 1, r = 1), Root Tversky (w = 1), the General Union
loss (distance weights) and the "prior" Tversky variant (distance weights,
r = 1).  Dice and weighted Dice share a second core.  Because the reductions
literally share code paths they agree bit for bit.

Gradients of the rooted losses replace ``p**(r-1)`` by ``(p + eps)**(r-1)``
so that voxels with ``p = 0`` receive a finite push.  The loss *value* keeps
the exact ``p**r``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

LOSS_KINDS = (
    "dice",
    "weighted_dice",
    "tversky",
    "root_tversky",
    "general_union",
    "prior_tversky",
    "dice_wbce",
)


class LossError(ValueError):
    pass


def magnitude_main(alpha: float) -> float:
    """Weight-decay magnitude tied to alpha: m = (1 - 2a) / (1 - a)."""
    return (1.0 - 2.0 * alpha) / (1.0 - alpha)


def magnitude_alt(alpha: float) -> float:
    """Alternate tie m = (1 - a) / a.  Only valid (m < 1) for alpha > 0.5."""
    return (1.0 - alpha) / alpha


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters shared by the union-family losses.

    ``m=None`` derives the weight-decay magnitude from ``alpha`` using
    ``m_formula`` ("main" or "alt").
    """

    alpha: float = 0.1
    root: float = 0.7
    distance_root: float = 0.5
    epsilon: float = 1e-4
    m: float | None = None
    m_formula: str = "main"
    bce_weight: float = 1.0
    fg_weight: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise LossError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.root <= 1.0:
            raise LossError(f"root must lie in (0, 1], got {self.root}")
        if self.distance_root <= 0:
            raise LossError("distance_root must be positive")
        if self.epsilon <= 0:
            raise LossError("epsilon must be positive")
        if self.m_formula not in ("main", "alt"):
            raise LossError(f"unknown m_formula {self.m_formula!r}")
        if not 0.0 <= self.magnitude < 1.0:
            raise LossError(f"weight magnitude m must lie in [0, 1), got {self.magnitude}")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    @property
    def magnitude(self) -> float:
        if self.m is not None:
            return float(self.m)
        if self.m_formula == "main":
            return magnitude_main(self.alpha)
        return magnitude_alt(self.alpha)

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class LossResult:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class GradientRatioReport:
    empirical_ratio: float
    closed_form_ratio: float
    lower_bound: float


def _prepare(pred, gt, weights=None):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise LossError(f"dim mismatch: pred {p.shape} vs gt {g.shape}")
    if not np.any(g > 0):
        raise LossError("ground truth has no foreground voxel")
    if weights is None:
        return p, g, None
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != p.shape:
        raise LossError(f"dim mismatch: weights {w.shape} vs pred {p.shape}")
    if np.any(w <= 0):
        raise LossError("weights must be strictly positive")
    return p, g, w


def _dice_core(p, g, w):
    inter = np.sum(w * p * g)
    total = np.sum(w * (p + g))
    value = 1.0 - 2.0 * inter / total
    grad = -2.0 * w * (g * total - inter) / total**2
    return LossResult(float(value), grad)


def _union_core(p, g, w, alpha, r, eps):
    beta = 1.0 - alpha
    pr = p if r == 1.0 else p**r
    num = np.sum(w * pr * g)
    den = np.sum(w * (alpha * p + beta * g))
    value = 1.0 - num / den
    if r == 1.0:
        dpr = np.ones_like(p)
    else:
        dpr = r * (p + eps) ** (r - 1.0)
    grad = -w * (g * dpr * den - alpha * num) / den**2
    return LossResult(float(value), grad)


def dice(pred, gt) -> LossResult:
    p, g, _ = _prepare(pred, gt)
    return _dice_core(p, g, np.ones_like(p))


def weighted_dice(pred, gt, weights) -> LossResult:
    p, g, w = _prepare(pred, gt, weights)
    return _dice_core(p, g, w)


def tversky(pred, gt, cfg: LossConfig) -> LossResult:
    p, g, _ = _prepare(pred, gt)
    return _union_core(p, g, np.ones_like(p), cfg.alpha, 1.0, cfg.epsilon)


def root_tversky(pred, gt, cfg: LossConfig) -> LossResult:
    p, g, _ = _prepare(pred, gt)
    return _union_core(p, g, np.ones_like(p), cfg.alpha, cfg.root, cfg.epsilon)


def _check_union_weights(g, w, m):
    fg = g > 0
    tol = 1e-9
    if np.any(w[fg] < 1.0 - m - tol) or np.any(w[fg] > 1.0 + tol):
        raise LossError(f"foreground weights must lie in [1 - m, 1] = [{1 - m:g}, 1]")
    if np.any(np.abs(w[~fg] - 1.0) > tol):
        raise LossError("background weights must equal 1")


def general_union(pred, gt, weights, cfg: LossConfig) -> LossResult:
    p, g, w = _prepare(pred, gt, weights)
    _check_union_weights(g, w, cfg.magnitude)
    return _union_core(p, g, w, cfg.alpha, cfg.root, cfg.epsilon)


def prior_tversky(pred, gt, weights, cfg: LossConfig) -> LossResult:
    """General Union loss with the focal root switched off (r = 1)."""
    return general_union(pred, gt, weights, cfg.with_(root=1.0))


def dice_wbce(pred, gt, cfg: LossConfig) -> LossResult:
    """Dice plus ``bce_weight`` times a foreground-weighted, voxel-averaged BCE."""
    p, g, _ = _prepare(pred, gt)
    base = _dice_core(p, g, np.ones_like(p))
    n = p.size
    wf = cfg.fg_weight
    tiny = 1e-12
    pc = np.clip(p, tiny, 1.0 - tiny)
    bce = -np.sum(wf * g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)) / n
    dbce = -(wf * g / pc - (1.0 - g) / (1.0 - pc)) / n
    lam = cfg.bce_weight
    return LossResult(base.value + lam * float(bce), base.gradient + lam * dbce)


def evaluate(kind: str, pred, gt, weights=None, cfg: LossConfig | None = None) -> LossResult:
    """Dispatch by loss name."""
    cfg = cfg or LossConfig()
    if kind == "dice":
        return dice(pred, gt)
    if kind == "weighted_dice":
        return weighted_dice(pred, gt, _need(weights, kind))
    if kind == "tversky":
        return tversky(pred, gt, cfg)
    if kind == "root_tversky":
        return root_tversky(pred, gt, cfg)
    if kind == "general_union":
        return general_union(pred, gt, _need(weights, kind), cfg)
    if kind == "prior_tversky":
        return prior_tversky(pred, gt, _need(weights, kind), cfg)
    if kind == "dice_wbce":
        return dice_wbce(pred, gt, cfg)
    raise LossError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def _need(weights, kind):
    if weights is None:
        raise LossError(f"{kind} needs a weight map")
    return weights


def lower_bound(kind: str, cfg: LossConfig | None = None, weights=None, gt=None) -> float:
    """Smallest admissible foreground/background gradient ratio.

    ``dice_wbce`` has no closed-form bound and reports 0.
    """
    cfg = cfg or LossConfig()
    if kind == "dice":
        return 1.0
    if kind == "weighted_dice":
        g = np.asarray(gt) > 0
        w = np.asarray(weights, dtype=np.float64)
        return float(w[g].min() / w[~g].mean())
    if kind == "tversky":
        return cfg.beta / cfg.alpha
    if kind == "root_tversky":
        return cfg.root / cfg.alpha - 1.0
    if kind == "general_union":
        return (1.0 - cfg.magnitude) * (cfg.root / cfg.alpha - 1.0)
    if kind == "prior_tversky":
        return (1.0 - cfg.magnitude) * (1.0 / cfg.alpha - 1.0)
    if kind == "dice_wbce":
        return 0.0
    raise LossError(f"unknown loss kind {kind!r}")


def closed_form_ratio(kind: str, value: float, pred, gt, weights=None, cfg: LossConfig | None = None):
    """Per-foreground-voxel gradient ratio predicted from the loss value.

    Returns an array over the foreground voxels (constant for Dice, weighted
    Dice with class-constant weights and Tversky).
    """
    cfg = cfg or LossConfig()
    p = np.asarray(pred, dtype=np.float64)
    fg = np.asarray(gt) > 0
    pf = p[fg]
    a, r, eps = cfg.alpha, cfg.root, cfg.epsilon
    if kind == "dice":
        return np.full(pf.shape, 2.0 / (1.0 - value) - 1.0)
    if kind == "weighted_dice":
        w = np.asarray(weights, dtype=np.float64)
        return w[fg] / w[~fg].mean() * (2.0 / (1.0 - value) - 1.0)
    if kind == "tversky":
        return np.full(pf.shape, 1.0 / a / (1.0 - value) - 1.0)
    if kind in ("root_tversky", "general_union", "prior_tversky"):
        if kind == "prior_tversky":
            r = 1.0
        amp = np.ones_like(pf) if r == 1.0 else r * (pf + eps) ** (r - 1.0)
        ratio = amp / a / (1.0 - value) - 1.0
        if kind != "root_tversky":
            ratio = np.asarray(weights, dtype=np.float64)[fg] * ratio
        return ratio
    if kind == "dice_wbce":
        return _dice_wbce_ratio(p, fg, cfg)
    raise LossError(f"unknown loss kind {kind!r}")


def _dice_wbce_ratio(p, fg, cfg):
    # Dice part from the Dice aggregates, BCE part voxelwise.
    g = fg.astype(np.float64)
    inter = np.sum(p * g)
    total = np.sum(p) + np.sum(g)
    n = p.size
    d_f = -2.0 * (total - inter) / total**2
    d_b = 2.0 * inter / total**2
    pf, pb = p[fg], p[~fg]
    grad_f = d_f - cfg.bce_weight * cfg.fg_weight / (n * pf)
    grad_b = d_b + cfg.bce_weight / (n * (1.0 - pb))
    return np.abs(grad_f) / np.abs(grad_b).mean()


def gradient_ratio(kind: str, pred, gt, weights=None, cfg: LossConfig | None = None) -> GradientRatioReport:
    """Foreground/background gradient ratio, empirical vs closed form.

    For losses whose ratio varies per voxel both sides report the minimum
    over foreground voxels, which is the quantity the lower bound constrains.
    The ratio is signed, ``-dL/dp_fg / mean(dL/dp_bg)``: with a root r < 1 a
    foreground voxel whose p is already high can receive a positive gradient,
    and the closed form (and its bound) go negative with it.
    """
    cfg = cfg or LossConfig()
    fg = np.asarray(gt) > 0
    if fg.all() or not fg.any():
        raise LossError("gradient ratio needs both foreground and background voxels")
    res = evaluate(kind, pred, gt, weights, cfg)
    g_b = res.gradient[~fg].mean()
    with np.errstate(divide="ignore"):
        empirical = float(np.min(-res.gradient[fg]) / g_b)
    closed = float(np.min(closed_form_ratio(kind, res.value, pred, gt, weights, cfg)))
    return GradientRatioReport(empirical, closed, lower_bound(kind, cfg, weights, gt))


def finite_difference_check(
    kind: str, pred, gt, weights=None, cfg: LossConfig | None = None, h: float = 1e-5
) -> float:
    """Max relative error between central differences and the analytic gradient.

    The rooted losses stabilise their gradient with ``epsilon``; pass a config
    with a negligible epsilon to compare against the exact derivative.
    """
    cfg = cfg or LossConfig()
    p = np.array(pred, dtype=np.float64)
    analytic = evaluate(kind, p, gt, weights, cfg).gradient
    flat = p.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = evaluate(kind, p, gt, weights, cfg).value
        flat[i] = old - h
        down = evaluate(kind, p, gt, weights, cfg).value
        flat[i] = old
        numeric[i] = (up - down) / (2.0 * h)
    a = analytic.reshape(-1)
    floor = 1e-8 * max(np.abs(a).max(), 1e-300)
    return float(np.max(np.abs(numeric - a) / np.maximum(np.abs(a), floor)))
