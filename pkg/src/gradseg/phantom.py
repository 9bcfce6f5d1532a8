"""Synthetic airway-like branching tubes with exact ground truth.

A phantom is a binary tree of capsules (segments with hemispherical caps).
Each generation shrinks radius and segment length by fixed factors and
splits into two children deflected by ``branch_angle`` around a rotating
bifurcation plane.  Junctions get an extra sphere slightly larger than the
parent radius, which blurs the lumen at bifurcations.

Intensities are synthesised in Hounsfield units: air-filled lumen, a bright
wall shell of fixed thickness around the mask, parenchyma elsewhere, an
optional Gaussian point spread and additive Gaussian noise.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .skeleton import Branch, CenterlineGraph, Node, parse_tree, thin, write_graph
from .volume import Volume, write_volume


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    depth: int = 5
    root_radius: float = 3.5
    radius_decay: float = 0.68
    segment_length: float = 16.0
    length_decay: float = 0.78
    branch_angle: float = 38.0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lumen_level: float = -1000.0
    wall_level: float = 0.0
    wall_thickness: float = 1.0
    background_level: float = -850.0
    noise_sigma: float = 60.0
    blur_sigma: float = 0.6
    junction_dilation: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise PhantomError("depth must be at least 1")
        deepest = self.root_radius * self.radius_decay ** (self.depth - 1)
        if deepest < 0.5 * max(self.spacing):
            raise PhantomError(
                f"deepest radius {deepest:.3g} mm is below half the voxel size"
            )

    def radius(self, generation: int) -> float:
        return self.root_radius * self.radius_decay**generation

    def length(self, generation: int) -> float:
        return self.segment_length * self.length_decay**generation

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Phantom:
    image: Volume  # HU intensities
    mask: Volume
    graph: CenterlineGraph
    spec: PhantomSpec | None = None
    segments: list = field(repr=False, default_factory=list)  # (a, b, radius, generation) in mm
    spheres: list = field(repr=False, default_factory=list)  # (center, radius) in mm

    def __iter__(self):
        return iter((self.image, self.mask, self.graph))


def _rotate(v, axis, angle):
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)


def _perpendicular(d):
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = np.cross(d, ref)
    return p / np.linalg.norm(p)


def build_tree(spec: PhantomSpec):
    """Analytic centerline segments ``(start, end, radius, generation, parent)``."""
    rng = np.random.default_rng(spec.seed)
    extent = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    start = np.array([extent[0] / 2, extent[1] / 2, extent[2] - spec.root_radius - 2.0])
    start[:2] += rng.uniform(-2.0, 2.0, size=2)
    segs = []
    # (start, direction, generation, parent index, bifurcation-plane normal)
    stack = [(start, np.array([0.0, 0.0, -1.0]), 0, -1, _perpendicular(np.array([0.0, 0.0, -1.0])))]
    angle = np.deg2rad(spec.branch_angle)
    while stack:
        s, d, gen, parent, normal = stack.pop(0)
        e = s + d * spec.length(gen)
        idx = len(segs)
        segs.append((s, e, spec.radius(gen), gen, parent))
        if gen + 1 >= spec.depth:
            continue
        # rotate the bifurcation plane by roughly 90 degrees each generation
        normal = _rotate(normal, d, np.pi / 2 + rng.uniform(-0.4, 0.4))
        normal -= d * np.dot(normal, d)
        normal /= np.linalg.norm(normal)
        spread = angle * rng.uniform(0.85, 1.15, size=2)
        for sign, a in zip((1.0, -1.0), spread):
            child = _rotate(d, normal, sign * a)
            stack.append((e, child / np.linalg.norm(child), gen + 1, idx, normal))
    return segs


def _rasterize(dims, spacing, segs, spheres):
    """Union of capsules and spheres, evaluated at voxel centres."""
    spacing = np.asarray(spacing, dtype=float)
    mask = np.zeros(dims, dtype=bool)
    for a, b, r in segs:
        lo = np.floor((np.minimum(a, b) - r) / spacing).astype(int)
        hi = np.ceil((np.maximum(a, b) + r) / spacing).astype(int) + 1
        lo = np.clip(lo, 0, dims)
        hi = np.clip(hi, 0, dims)
        if np.any(hi <= lo):
            continue
        grid = np.stack(
            np.meshgrid(*[np.arange(l, h) * s for l, h, s in zip(lo, hi, spacing)], indexing="ij"),
            axis=-1,
        )
        ab = b - a
        t = np.clip(((grid - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        closest = a + t[..., None] * ab
        inside = ((grid - closest) ** 2).sum(-1) <= r * r
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside
    for c, r in spheres:
        segs_like = [(np.asarray(c), np.asarray(c), r)]
        mask |= _rasterize(dims, spacing, segs_like, [])
    return mask


def _segment_path(a, b, spacing, dims):
    n = int(np.ceil(np.linalg.norm((b - a) / spacing) * 4)) + 1
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
    vox = np.clip(np.rint(pts / spacing).astype(int), 0, np.asarray(dims) - 1)
    keep = np.ones(len(vox), dtype=bool)
    keep[1:] = np.any(np.diff(vox, axis=0) != 0, axis=1)
    return vox[keep]


def generate(spec: PhantomSpec) -> Phantom:
    """Render a phantom: HU image, binary mask and the analytic centerline graph."""
    dims = tuple(int(n) for n in spec.dims)
    spacing = np.asarray(spec.spacing, dtype=float)
    extent = (np.asarray(dims) - 1) * spacing
    tree = build_tree(spec)
    for s, e, r, gen, _ in tree:
        for p in (s, e):
            if np.any(p - r < 0) or np.any(p + r > extent):
                raise PhantomError(
                    f"tree exits the volume: generation {gen} point {np.round(p, 2)} radius {r:.2f}"
                )

    segments = [(s, e, r, gen) for s, e, r, gen, _ in tree]
    spheres = []
    children: dict[int, list[int]] = {}
    for i, (*_, parent) in enumerate(tree):
        children.setdefault(parent, []).append(i)
    for i, (s, e, r, gen, _) in enumerate(tree):
        if i in children:
            spheres.append((e, r * (1.0 + spec.junction_dilation)))

    mask = _rasterize(dims, spacing, [(s, e, r) for s, e, r, _ in segments], spheres)

    # graph: node 0 is the root's free end, then one node per segment end
    nodes = [Node(0, tuple(int(v) for v in np.rint(tree[0][0] / spacing)), "endpoint")]
    branches = []
    end_node = {}
    for i, (s, e, r, gen, parent) in enumerate(tree):
        nid = len(nodes)
        kind = "bifurcation" if i in children else "endpoint"
        nodes.append(Node(nid, tuple(int(v) for v in np.rint(e / spacing)), kind))
        end_node[i] = nid
        start_node = 0 if parent < 0 else end_node[parent]
        path = _segment_path(s, e, spacing, dims)
        branches.append(
            Branch(i, start_node, nid, path, float(np.linalg.norm(e - s)), 2.0 * r, gen)
        )
    graph = CenterlineGraph(nodes, branches, dims, tuple(float(v) for v in spacing))

    image = render_intensity(mask, spec)
    return Phantom(
        Volume(image, spec.spacing, "intensity"),
        Volume(mask.astype(np.uint8), spec.spacing, "binary"),
        graph,
        spec,
        segments,
        spheres,
    )


def render_intensity(mask: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    dist_out = ndi.distance_transform_edt(~mask, sampling=spec.spacing)
    img = np.full(mask.shape, spec.background_level, dtype=np.float64)
    img[(dist_out > 0) & (dist_out <= spec.wall_thickness)] = spec.wall_level
    img[mask] = spec.lumen_level
    if spec.blur_sigma > 0:
        img = ndi.gaussian_filter(img, sigma=spec.blur_sigma / np.asarray(spec.spacing), mode="nearest")
    img += rng.normal(0.0, spec.noise_sigma, size=mask.shape)
    return img.astype(np.float32)


def imbalance_profile(mask, graph: CenterlineGraph) -> tuple[float, dict[int, float]]:
    """Foreground fraction and the share of foreground volume per generation.

    Each foreground voxel is credited to the generation of its nearest
    centerline voxel.
    """
    g = np.asarray(mask) > 0
    frac = float(g.mean())
    if not g.any():
        return frac, {}
    label = np.zeros(g.shape, dtype=np.int32)
    for b in graph.branches:
        gen = 0 if b.generation is None else b.generation
        label[tuple(b.path.T)] = gen + 1
    _, idx = ndi.distance_transform_edt(label == 0, sampling=graph.spacing, return_indices=True)
    gens = label[tuple(idx)][g] - 1
    counts = np.bincount(gens)
    total = counts.sum()
    return frac, {int(k): float(c / total) for k, c in enumerate(counts) if c > 0}


def topology_matches(ph: Phantom) -> bool:
    """True when thinning the mask recovers the analytic branch count."""
    return len(parse_tree(thin(ph.mask)).branches) == len(ph.graph.branches)


def make_dataset(
    spec: PhantomSpec, n: int, max_tries: int = 1000, check_topology: bool = True
) -> list[Phantom]:
    """``n`` phantoms from consecutive seeds starting at ``spec.seed``.

    Seeds whose tree leaves the volume are skipped, and with
    ``check_topology`` so are seeds whose thinned mask does not reproduce the
    analytic branch count (a short leaf can vanish under thinning).
    """
    out = []
    seed = spec.seed
    tries = 0
    while len(out) < n:
        if tries >= max_tries:
            raise PhantomError(f"only {len(out)} of {n} phantoms fit after {max_tries} seeds")
        try:
            ph = generate(_with_seed(spec, seed))
            if not check_topology or topology_matches(ph):
                out.append(ph)
        except PhantomError:
            pass
        seed += 1
        tries += 1
    return out


def _with_seed(spec, seed):
    d = spec.to_dict()
    d["seed"] = int(seed)
    return PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def write_dataset(phantoms: list[Phantom], spec: PhantomSpec, outdir: str | os.PathLike) -> str:
    """Write image/mask AVOL files, graph text files and a manifest CSV."""
    os.makedirs(outdir, exist_ok=True)
    manifest = os.path.join(outdir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "seed", "foreground_fraction", "branches", "spec"])
        for i, ph in enumerate(phantoms):
            used = ph.spec or spec
            name = f"phantom_{i:04d}"
            base = os.path.join(outdir, name)
            write_volume(ph.image, base + "_image.avol")
            write_volume(ph.mask, base + "_mask.avol")
            write_graph(ph.graph, base + "_graph.txt")
            w.writerow([name, used.seed, f"{np.asarray(ph.mask).mean():.8f}",
                        len(ph.graph.branches), json.dumps(used.to_dict(), sort_keys=True)])
    return manifest
