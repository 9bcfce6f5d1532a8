"""Overlap and airway-tree metrics, with per-diameter stratification.

Tree metrics follow the usual airway-challenge definitions: *length
detected* is the fraction of ground-truth centerline length lying inside the
prediction, *branch detected* the fraction of branches whose own centerline
is covered to at least ``tau_b``.  Undefined quantities (precision of an
empty prediction, metrics of an empty diameter bin) are reported as ``None``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .skeleton import STRUCT26, CenterlineGraph
from .volume import Volume

DEFAULT_BINS = (0.0, 2.0, 4.0, 6.0, 8.0, math.inf)


class MetricsError(ValueError):
    pass


def _binary(x) -> np.ndarray:
    return np.asarray(x) > 0


def largest_component(mask):
    """Keep only the largest 26-connected foreground component."""
    m = _binary(mask)
    lab, n = ndi.label(m, STRUCT26)
    if n > 1:
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        m = lab == int(np.argmax(sizes))
    if isinstance(mask, Volume):
        return mask.with_data(m.astype(np.uint8), "binary")
    return m


def confusion(pred, gt) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) voxel counts."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise MetricsError(f"dim mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def _dsc(tp, fp, fn):
    den = 2 * tp + fp + fn
    return None if den == 0 else 2 * tp / den


def _precision(tp, fp):
    return None if tp + fp == 0 else tp / (tp + fp)


def _tversky_index(tp, fp, fn, alpha):
    den = tp + alpha * fp + (1.0 - alpha) * fn
    return None if den == 0 else tp / den


def voxel_metrics(pred, gt) -> tuple[float | None, float | None]:
    """(DSC, precision).  Precision of an empty prediction is ``None``."""
    tp, fp, fn, _ = confusion(pred, gt)
    return _dsc(tp, fp, fn), _precision(tp, fp)


def tversky_index(pred, gt, alpha: float = 0.5) -> float | None:
    tp, fp, fn, _ = confusion(pred, gt)
    return _tversky_index(tp, fp, fn, alpha)


def _covered(pred: np.ndarray, spacing, tolerance: float) -> np.ndarray:
    if tolerance <= 0:
        return pred
    return ndi.distance_transform_edt(~pred, sampling=spacing) <= tolerance


def _branch_coverage(covered: np.ndarray, graph: CenterlineGraph) -> np.ndarray:
    cov = []
    for b in graph.branches:
        if len(b.path) == 0:
            cov.append(0.0)
        else:
            cov.append(float(covered[tuple(b.path.T)].mean()))
    return np.array(cov)


def tree_metrics(
    pred, graph: CenterlineGraph, tau_b: float = 0.8, tolerance: float = 0.0
) -> tuple[float, float]:
    """(length detected, branch detected) of ``pred`` against a centerline graph.

    A centerline voxel counts as detected when it is foreground in ``pred``,
    or within ``tolerance`` mm of a foreground voxel.
    """
    if not graph.branches:
        raise MetricsError("empty centerline graph")
    if not 0.0 < tau_b <= 1.0:
        raise MetricsError("tau_b must lie in (0, 1]")
    covered = _covered(_binary(pred), graph.spacing, tolerance)
    vox, _, share = graph.centerline_voxels()
    inside = covered[tuple(vox.T)]
    total = share.sum()
    length = float(share[inside].sum() / total) if total > 0 else float(inside.mean())
    cov = _branch_coverage(covered, graph)
    return length, float(np.mean(cov >= tau_b - 1e-12))


@dataclass
class StratumMetrics:
    low: float
    high: float
    n_branches: int
    centerline_length: float
    dsc: float | None = None
    precision: float | None = None
    length_detected: float | None = None
    branch_detected: float | None = None
    tversky_index: float | None = None

    @property
    def populated(self) -> bool:
        return self.n_branches > 0


@dataclass
class MetricsReport:
    dsc: float | None
    precision: float | None
    length_detected: float
    branch_detected: float
    tversky_index: float | None
    alpha: float = 0.5
    tau_b: float = 0.8
    per_stratum: list[StratumMetrics] = field(default_factory=list)

    def stratum(self, low: float) -> StratumMetrics:
        for s in self.per_stratum:
            if s.low == low:
                return s
        raise KeyError(low)

    def thinnest(self) -> StratumMetrics | None:
        """Lowest-diameter populated stratum."""
        for s in self.per_stratum:
            if s.populated:
                return s
        return None

    def rows(self) -> list[dict]:
        tkey = f"tversky_a{self.alpha:g}"
        out = [
            {
                "stratum": "overall",
                "low_mm": None,
                "high_mm": None,
                "n_branches": None,
                "dsc": self.dsc,
                "precision": self.precision,
                "length_detected": self.length_detected,
                "branch_detected": self.branch_detected,
                tkey: self.tversky_index,
                "tau_b": self.tau_b,
            }
        ]
        for s in self.per_stratum:
            out.append(
                {
                    "stratum": f"[{s.low:g},{s.high:g})",
                    "low_mm": s.low,
                    "high_mm": s.high,
                    "n_branches": s.n_branches,
                    "dsc": s.dsc,
                    "precision": s.precision,
                    "length_detected": s.length_detected,
                    "branch_detected": s.branch_detected,
                    tkey: s.tversky_index,
                    "tau_b": self.tau_b,
                }
            )
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        d[f"tversky_a{self.alpha:g}"] = d.pop("tversky_index")
        for s in d["per_stratum"]:
            s[f"tversky_a{self.alpha:g}"] = s.pop("tversky_index")
            if math.isinf(s["high"]):
                s["high"] = None
        return json.dumps(d, indent=2)


def _stratum_of(diameters, bins):
    idx = np.searchsorted(np.asarray(bins), diameters, side="right") - 1
    return np.where(np.isfinite(diameters), idx, -1)


def stratified_metrics(
    pred,
    gt,
    graph: CenterlineGraph,
    bins=DEFAULT_BINS,
    alpha: float = 0.5,
    tau_b: float = 0.8,
    tolerance: float = 0.0,
) -> MetricsReport:
    """Overall metrics plus a breakdown by branch diameter interval.

    Voxel-level scores per interval are computed over the voxels whose
    nearest ground-truth centerline voxel belongs to a branch of that
    interval.
    """
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise MetricsError(f"dim mismatch: {p.shape} vs {g.shape}")
    if not graph.branches:
        raise MetricsError("empty centerline graph")
    diam = np.array([b.diameter for b in graph.branches], dtype=float)
    if np.any(np.isnan(diam)):
        raise MetricsError("branch diameters are not populated")

    tp, fp, fn, _ = confusion(p, g)
    length, branch = tree_metrics(p, graph, tau_b, tolerance)
    report = MetricsReport(
        _dsc(tp, fp, fn), _precision(tp, fp), length, branch,
        _tversky_index(tp, fp, fn, alpha), alpha, tau_b,
    )

    nbin = len(bins) - 1
    branch_bin = _stratum_of(diam, bins)
    covered = _covered(p, graph.spacing, tolerance)
    cov = _branch_coverage(covered, graph)
    vox, owner, share = graph.centerline_voxels()
    inside = covered[tuple(vox.T)]

    # nearest-centerline-branch assignment of every voxel
    label = np.zeros(p.shape, dtype=np.int32)
    label[tuple(vox.T)] = branch_bin[owner] + 1
    _, idx = ndi.distance_transform_edt(label == 0, sampling=graph.spacing, return_indices=True)
    voxel_bin = label[tuple(idx)] - 1

    for k in range(nbin):
        members = branch_bin == k
        mine = branch_bin[owner] == k
        s = StratumMetrics(float(bins[k]), float(bins[k + 1]), int(members.sum()), float(share[mine].sum()))
        if s.populated:
            region = voxel_bin == k
            ktp, kfp, kfn, _ = confusion(p & region, g & region)
            s.dsc = _dsc(ktp, kfp, kfn)
            s.precision = _precision(ktp, kfp)
            s.tversky_index = _tversky_index(ktp, kfp, kfn, alpha)
            s.branch_detected = float(np.mean(cov[members] >= tau_b - 1e-12))
            if s.centerline_length > 0:
                s.length_detected = float(share[mine & inside].sum() / s.centerline_length)
        report.per_stratum.append(s)
    return report
