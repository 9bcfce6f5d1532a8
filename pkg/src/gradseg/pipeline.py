"""Training orchestration: skeleton-guided patch sampling, rotation
augmentation, staged SGD and sliding-window inference."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage as ndi

from . import losses
from .metrics import DEFAULT_BINS, largest_component, stratified_metrics
from .net import Net, NetSpec, Sample, SupervisionScheme, forward_backward, write_checkpoint
from .skeleton import CenterlineGraph, distance_to_centerline, thin
from .volume import Volume, preprocess_ct


class PipelineError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# data ----------------------------------------------------------------------


@dataclass
class TrainItem:
    """One volume ready for training or evaluation.

    ``image`` is the preprocessed intensity scaled to [0, 1]; ``dist`` is the
    foreground distance to the centerline divided by its maximum.
    """

    image: np.ndarray
    mask: np.ndarray
    skeleton: np.ndarray  # (k, 3) centerline voxels
    dist: np.ndarray
    graph: CenterlineGraph | None = None
    name: str = ""


def prepare_item(image: Volume, mask: Volume, graph: CenterlineGraph | None = None, name: str = "") -> TrainItem:
    g = np.asarray(mask) > 0
    sk = thin(mask)
    if len(sk) == 0:
        raise PipelineError(f"{name or 'volume'}: empty skeleton")
    d = np.where(g, distance_to_centerline(g, sk, mask.spacing), 0.0)
    dmax = d.max()
    dist = (d / dmax if dmax > 0 else d).astype(np.float32)
    x = np.asarray(preprocess_ct(image, mask=None), dtype=np.float32) / 255.0
    return TrainItem(x, g.astype(np.uint8), sk.voxels, dist, graph, name)


def prepare_dataset(phantoms) -> list[TrainItem]:
    return [prepare_item(p.image, p.mask, p.graph, f"seed{p.spec.seed}" if p.spec else str(i))
            for i, p in enumerate(phantoms)]


# sampling ------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    patch: tuple[int, int, int] = (32, 32, 32)
    p_s: float = 0.5
    patches_per_volume: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_s <= 1.0:
            raise PipelineError("p_s must lie in [0, 1]")
        if any(int(n) < 1 for n in self.patch):
            raise PipelineError("patch dims must be positive")
        if self.patches_per_volume < 1:
            raise PipelineError("need at least one patch per volume")


@dataclass(frozen=True)
class Provenance:
    center: tuple[int, int, int]
    mode: str  # "hard" or "uniform"
    volume: int = -1


def crop(arr: np.ndarray, center, size, fill=0) -> np.ndarray:
    """Box of ``size`` starting at ``center - size // 2``; outside voxels get ``fill``."""
    center = np.asarray(center, dtype=int)
    size = np.asarray(size, dtype=int)
    lo = center - size // 2
    hi = lo + size
    out = np.full(tuple(size), fill, dtype=arr.dtype)
    slo = np.maximum(lo, 0)
    shi = np.minimum(hi, arr.shape)
    if np.any(shi <= slo):
        return out
    dst = tuple(slice(a - l, b - l) for a, b, l in zip(slo, shi, lo))
    out[dst] = arr[tuple(slice(a, b) for a, b in zip(slo, shi))]
    return out


def sample_center(skeleton: np.ndarray, hard: np.ndarray | None, p_s: float, rng) -> tuple[np.ndarray, str]:
    if len(skeleton) == 0:
        raise PipelineError("empty skeleton")
    if hard is not None and len(hard) and rng.random() < p_s:
        return np.asarray(hard[rng.integers(len(hard))]), "hard"
    return np.asarray(skeleton[rng.integers(len(skeleton))]), "uniform"


def sample_patch(volume, mask, skeleton, hard, cfg: SamplerConfig, rng, extra=()):
    """Crop a patch centred on a skeleton voxel.

    With probability ``p_s`` (and a nonempty hard set) the centre is a hard
    voxel, otherwise it is uniform over the skeleton.  ``extra`` arrays are
    cropped with the same box.  Returns ``(patch, patch_mask, provenance,
    extra_crops)``.
    """
    vol = np.asarray(volume)
    if any(p > n for p, n in zip(cfg.patch, vol.shape)):
        raise PipelineError(f"patch {cfg.patch} larger than volume {vol.shape}")
    skeleton = getattr(skeleton, "voxels", skeleton)
    hard = getattr(hard, "voxels", hard)
    c, mode = sample_center(np.asarray(skeleton), None if hard is None else np.asarray(hard), cfg.p_s, rng)
    patch = crop(vol, c, cfg.patch, 0)
    pmask = crop(np.asarray(mask), c, cfg.patch, 0)
    more = [crop(np.asarray(e), c, cfg.patch, 0) for e in extra]
    return patch, pmask, Provenance(tuple(int(v) for v in c), mode), more


# augmentation --------------------------------------------------------------


def augment_rotate(patch, mask, max_angle: float = 15.0, threshold: float = 0.7, rng=None,
                   angle: float | None = None, plane: tuple[int, int] | None = None, extra=()):
    """Rigid rotation in one coordinate plane with trilinear interpolation.

    The mask is interpolated as a float field and re-binarised at
    ``threshold``.  ``angle`` (degrees) and ``plane`` default to random draws.
    Returns ``(patch, mask, extra)``; extra fields are interpolated only.
    """
    if not 0.0 < threshold < 1.0:
        raise PipelineError("threshold must lie in (0, 1)")
    if not 0.0 <= max_angle <= 15.0:
        raise PipelineError("angle range must lie within [-15, 15] degrees")
    rng = rng if rng is not None else np.random.default_rng()
    if angle is None:
        angle = float(rng.uniform(-max_angle, max_angle))
    if plane is None:
        planes = ((0, 1), (0, 2), (1, 2))
        plane = planes[int(rng.integers(3))]
    mask = np.asarray(mask)
    if angle == 0.0:
        return np.array(patch), (mask > 0).astype(np.uint8), [np.array(e) for e in extra]

    def rot(a):
        return ndi.rotate(np.asarray(a, dtype=np.float32), angle, axes=plane, reshape=False,
                          order=1, mode="constant", cval=0.0)

    out_mask = (rot((mask > 0).astype(np.float32)) >= threshold).astype(np.uint8)
    return rot(patch).astype(np.asarray(patch).dtype), out_mask, [rot(e) for e in extra]


# inference -----------------------------------------------------------------


def _pad_to(x: np.ndarray, step: int):
    pad = [(0, (-n) % step) for n in x.shape]
    return np.pad(x, pad) if any(p for _, p in pad) else x


def _positions(n, p, s):
    if n <= p:
        return [0]
    pos = list(range(0, n - p + 1, s))
    if pos[-1] != n - p:
        pos.append(n - p)
    return pos


def _window_weight(lo, patch, shape, margin):
    """1 on the window interior; a face on the volume boundary keeps its voxels."""
    w = np.ones(patch, dtype=np.float64)
    for ax, (a, p, n) in enumerate(zip(lo, patch, shape)):
        m = min(margin, p // 2)
        if m == 0:
            continue
        idx = [slice(None)] * 3
        if a > 0:
            idx[ax] = slice(0, m)
            w[tuple(idx)] = 0
        if a + p < n:
            idx[ax] = slice(p - m, p)
            w[tuple(idx)] = 0
    return w


def predict(net, volume, patch=None, stride=None, aggregate: str = "mean", margin: int = 0) -> Volume:
    """Probability map of a whole volume.

    ``patch=None`` runs one full-volume pass.  Otherwise windows of ``patch``
    voxels advance by ``stride`` and overlapping outputs are averaged (or
    max-combined).  ``margin`` discards that many voxels at each window face
    that lies inside the volume, where the window's zero padding differs from
    the true context; the stride must then leave every voxel in some window
    interior.  Edges are zero padded.
    """
    if isinstance(net, (str, os.PathLike)):
        from .net import read_checkpoint

        net, _ = read_checkpoint(net)
    if aggregate not in ("mean", "max"):
        raise PipelineError(f"unknown aggregation {aggregate!r}")
    spacing = getattr(volume, "spacing", (1.0, 1.0, 1.0))
    x = np.asarray(volume, dtype=np.float32)
    step = 2**net.spec.depth
    if patch is None:
        prob = net.predict(_pad_to(x, step)[None])[tuple(slice(0, n) for n in x.shape)]
        return Volume(np.clip(prob, 0.0, 1.0), spacing, "probability")
    patch = tuple(int(p) for p in patch)
    stride = patch if stride is None else tuple(int(s) for s in stride)
    if any(s < 1 or s > p for s, p in zip(stride, patch)):
        raise PipelineError("stride must lie in [1, patch]")
    if any(p % step for p in patch):
        raise PipelineError(f"patch dims must be multiples of {step}")
    if margin < 0 or any(s > p - 2 * margin for s, p in zip(stride, patch)):
        raise PipelineError("stride must not exceed patch - 2 * margin")
    big = np.pad(x, [(0, max(0, p - n)) for p, n in zip(patch, x.shape)])
    acc = np.zeros(big.shape, dtype=np.float64)
    cnt = np.zeros(big.shape, dtype=np.float64)
    for i in _positions(big.shape[0], patch[0], stride[0]):
        for j in _positions(big.shape[1], patch[1], stride[1]):
            for k in _positions(big.shape[2], patch[2], stride[2]):
                sl = (slice(i, i + patch[0]), slice(j, j + patch[1]), slice(k, k + patch[2]))
                p = net.predict(big[sl][None])
                w = _window_weight((i, j, k), patch, big.shape, margin)
                if aggregate == "mean":
                    acc[sl] += p * w
                    cnt[sl] += w
                else:
                    acc[sl] = np.maximum(acc[sl], p * w)
    if aggregate == "mean":
        acc /= np.maximum(cnt, 1e-12)
    prob = acc[tuple(slice(0, n) for n in x.shape)]
    return Volume(np.clip(prob, 0.0, 1.0).astype(np.float32), spacing, "probability")


def segment(prob, threshold: float = 0.5, keep_largest: bool = True):
    m = (np.asarray(prob) >= threshold).astype(np.uint8)
    return largest_component(m) if keep_largest else m > 0


def refresh_hard_set(net: Net, items: list[TrainItem]) -> list[np.ndarray]:
    """Skeleton voxels each volume's thresholded prediction misses."""
    out = []
    for it in items:
        prob = np.asarray(predict(net, it.image))
        miss = prob[tuple(it.skeleton.T)] < 0.5
        out.append(it.skeleton[miss])
    return out


# training ------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    lr: float = 0.01
    drops: tuple[int, ...] = ()
    loss: str = "general_union"
    loss_cfg: losses.LossConfig = field(default_factory=losses.LossConfig)
    threshold: float = 0.7
    rotate: bool = True
    max_angle: float = 15.0

    def __post_init__(self):
        object.__setattr__(self, "drops", tuple(int(d) for d in self.drops))
        if self.epochs < 0:
            raise PipelineError("epochs must be nonnegative")
        if self.loss not in losses.LOSS_KINDS:
            raise PipelineError(f"unknown loss {self.loss!r}")
        if any(not 0 < d < self.epochs for d in self.drops):
            raise PipelineError(f"LR drops {self.drops} must lie strictly inside (0, {self.epochs})")
        if list(self.drops) != sorted(set(self.drops)):
            raise PipelineError("LR drops must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        """LR for a 0-based epoch index: divided by 10 at every drop reached."""
        return self.lr * 0.1 ** sum(1 for d in self.drops if epoch >= d)


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StageConfig, ...]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    hard_refresh_every: int = 10
    eval_every: int = 0  # 0 = evaluate only after the last epoch

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.batch_size < 1:
            raise PipelineError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise PipelineError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def paper_schedule(seed: int = 0, **kw) -> TrainConfig:
    """Two-stage schedule: 100 epochs (drops 60, 90) then 30 (drops 15, 25)."""
    s1 = StageConfig(100, 0.01, (60, 90), "general_union", losses.LossConfig(alpha=0.1), 0.7)
    s2 = StageConfig(30, 0.01, (15, 25), "general_union", losses.LossConfig(alpha=0.2), 0.9)
    return TrainConfig((s1, s2), seed=seed, **kw)


def desk_schedule(seed: int = 0, **kw) -> TrainConfig:
    """Proportional shrink: 30 epochs (drops 18, 27) then 10 (drops 5, 8)."""
    s1 = StageConfig(30, 0.01, (18, 27), "general_union", losses.LossConfig(alpha=0.1), 0.7)
    s2 = StageConfig(10, 0.01, (5, 8), "general_union", losses.LossConfig(alpha=0.2), 0.9)
    return TrainConfig((s1, s2), seed=seed, **kw)


class SGD:
    """Momentum SGD with L2 weight decay added to the gradient."""

    def __init__(self, params, grads, momentum=0.9, weight_decay=1e-4):
        self.params, self.grads = params, grads
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, lr: float, scale: float = 1.0):
        for p, g, v in zip(self.params, self.grads, self.velocity):
            d = g * scale
            if self.weight_decay:
                d = d + self.weight_decay * p
            v *= self.momentum
            v += d
            p -= (lr * v).astype(p.dtype)


def evaluate(net: Net, items: list[TrainItem], bins=DEFAULT_BINS, alpha: float = 0.5, tau_b: float = 0.8) -> dict:
    """Mean overall and thinnest-stratum metrics over volumes with graphs."""
    rows = []
    for it in items:
        if it.graph is None:
            continue
        seg = segment(predict(net, it.image))
        rep = stratified_metrics(seg, it.mask, it.graph, bins, alpha, tau_b)
        thin_s = rep.thinnest()
        rows.append({
            "dsc": rep.dsc or 0.0,
            "precision": rep.precision if rep.precision is not None else 0.0,
            "length_detected": rep.length_detected,
            "branch_detected": rep.branch_detected,
            "tversky_index": rep.tversky_index or 0.0,
            "thin_length_detected": thin_s.length_detected if thin_s else None,
            "thin_branch_detected": thin_s.branch_detected if thin_s else None,
            "thin_precision": thin_s.precision if thin_s else None,
        })
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class TrainResult:
    net: Net
    trace: list[dict]
    checkpoint: str | None = None
    manifest: dict = field(default_factory=dict)


def _patch_rng(seed, stage, epoch, vid, k):
    return np.random.default_rng([seed, stage, epoch, vid, k])


def train(
    spec: NetSpec,
    scheme: SupervisionScheme,
    items: list[TrainItem],
    cfg: TrainConfig,
    test_items: list[TrainItem] | None = None,
    out_dir: str | os.PathLike | None = None,
    log=None,
) -> TrainResult:
    """Train a freshly initialised net through every stage of ``cfg``.

    Writes ``model.ckpt``, ``trace.csv`` and ``manifest.json`` to ``out_dir``
    when given.  ``log`` is an optional callable receiving one line per epoch.
    """
    if not items:
        raise PipelineError("empty training set")
    spec = spec.with_scheme(scheme)
    net = Net(spec, seed=cfg.seed)
    opt = SGD(net.params(), net.grads(), cfg.momentum, cfg.weight_decay)
    trace = []
    t0 = time.time()
    scfg = cfg.sampler
    for si, stage in enumerate(cfg.stages):
        hard = _refresh(net, items, out_dir, si, 0) if scfg.p_s > 0 and stage.epochs else [None] * len(items)
        for epoch in range(stage.epochs):
            if epoch and cfg.hard_refresh_every and epoch % cfg.hard_refresh_every == 0 and scfg.p_s > 0:
                hard = _refresh(net, items, out_dir, si, epoch)
            lr = stage.lr_at(epoch)
            order = np.random.default_rng([cfg.seed, si, epoch]).permutation(len(items))
            jobs = [(int(v), k) for k in range(scfg.patches_per_volume) for v in order]
            group_loss = np.zeros(len(net.order))
            n_hard = 0
            for start in range(0, len(jobs), cfg.batch_size):
                batch = []
                drop_rng = None
                for vid, k in jobs[start:start + cfg.batch_size]:
                    rng = _patch_rng(cfg.seed, si, epoch, vid, k)
                    it = items[vid]
                    x, m, prov, (d,) = sample_patch(it.image, it.mask, it.skeleton, hard[vid], scfg, rng, (it.dist,))
                    n_hard += prov.mode == "hard"
                    if stage.rotate and stage.max_angle > 0:
                        x, m, (d,) = augment_rotate(x, m, stage.max_angle, stage.threshold, rng, extra=(d,))
                    if not m.any():
                        continue
                    batch.append(Sample(x[None], m, np.where(m > 0, np.clip(d, 0, 1), 0.0)))
                    drop_rng = rng
                if not batch:
                    continue
                net.zero_grad()
                try:
                    vals = forward_backward(net, scheme, batch, stage.loss, stage.loss_cfg, True, drop_rng)
                except FloatingPointError as e:
                    _dump(net, out_dir, "diverged.ckpt")
                    raise TrainingDiverged(f"stage {si} epoch {epoch}: {e}") from e
                if not np.all(np.isfinite(vals)):
                    _dump(net, out_dir, "diverged.ckpt")
                    raise TrainingDiverged(f"stage {si} epoch {epoch}: loss {vals}")
                group_loss += np.asarray(vals) * len(batch)
                opt.step(lr, 1.0 / len(batch))
            row = {"stage": si, "epoch": epoch, "lr": lr, "hard_patches": n_hard}
            for gid, v in zip(net.order, group_loss / max(len(jobs), 1)):
                row[f"loss_g{gid}"] = float(v)
            last = si == len(cfg.stages) - 1 and epoch == stage.epochs - 1
            if test_items and ((cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or last):
                row.update(evaluate(net, test_items))
            row["elapsed_s"] = round(time.time() - t0, 3)
            trace.append(row)
            if log:
                log(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    manifest = {
        "net": spec.to_dict(),
        "scheme": scheme.to_dict(),
        "train": _jsonable(cfg.to_dict()),
        "n_train": len(items),
        "n_test": len(test_items or []),
        "train_names": [it.name for it in items],
    }
    ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "model.ckpt")
        write_checkpoint(net, ckpt, {"scheme": scheme.to_dict()})
        write_trace(trace, os.path.join(out_dir, "trace.csv"))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return TrainResult(net, trace, ckpt, manifest)


def _refresh(net, items, out_dir, stage, epoch):
    try:
        return refresh_hard_set(net, items)
    except FloatingPointError as e:
        _dump(net, out_dir, "diverged.ckpt")
        raise TrainingDiverged(f"stage {stage} epoch {epoch}: {e}") from e


def _dump(net, out_dir, name):
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_checkpoint(net, os.path.join(out_dir, name))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def write_trace(trace: list[dict], path) -> None:
    keys = []
    for row in trace:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})


def with_stage(cfg: TrainConfig, index: int, **changes) -> TrainConfig:
    stages = list(cfg.stages)
    stages[index] = replace(stages[index], **changes)
    return replace(cfg, stages=tuple(stages))
