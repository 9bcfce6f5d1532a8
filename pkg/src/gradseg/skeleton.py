"""Centerlines of tubular masks: thinning, branch graphs and distance weights.

Connectivity convention: 26-connectivity for foreground and skeleton voxels.
All lengths and distances are physical (mm) using the volume spacing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import skeletonize

from .volume import Volume

STRUCT26 = np.ones((3, 3, 3), dtype=bool)
OFFSETS26 = np.array([o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)])


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Skeleton:
    voxels: np.ndarray  # (k, 3) int indices, lexicographically sorted
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def as_mask(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=bool)
        if len(self.voxels):
            out[tuple(self.voxels.T)] = True
        return out

    @classmethod
    def from_mask(cls, mask, spacing=(1.0, 1.0, 1.0)) -> "Skeleton":
        m = np.asarray(mask) > 0
        return cls(np.argwhere(m), m.shape, tuple(float(s) for s in spacing))

    def __len__(self):
        return len(self.voxels)

    def __eq__(self, other):
        return (
            isinstance(other, Skeleton)
            and self.dims == other.dims
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass
class Node:
    id: int
    voxel: tuple[int, int, int]
    kind: str  # "endpoint" | "bifurcation"


@dataclass
class Branch:
    id: int
    n1: int
    n2: int
    path: np.ndarray  # (k, 3) voxel indices from n1 side to n2 side
    length: float  # mm
    diameter: float = float("nan")  # mm
    generation: int | None = None


@dataclass
class CenterlineGraph:
    nodes: list[Node]
    branches: list[Branch]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def total_length(self) -> float:
        return float(sum(b.length for b in self.branches))

    def counts(self) -> dict[str, int]:
        kinds = [n.kind for n in self.nodes]
        return {
            "branches": len(self.branches),
            "endpoints": kinds.count("endpoint"),
            "bifurcations": kinds.count("bifurcation"),
        }

    def with_diameters(self, diameters) -> "CenterlineGraph":
        branches = [replace(b, diameter=float(d)) for b, d in zip(self.branches, diameters)]
        return replace(self, branches=branches)

    def centerline_voxels(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unique centerline voxels with their owning branch and length share.

        Each branch's length is spread evenly over its path voxels; voxels that
        appear in several branch paths (junction voxels) are kept once, owned
        by the first branch listing them, and carry all the accumulated length.
        """
        seen: dict[tuple, int] = {}
        vox, owner, share = [], [], []
        for bi, b in enumerate(self.branches):
            k = len(b.path)
            if k == 0:
                continue
            per = b.length / k
            for v in map(tuple, b.path):
                j = seen.get(v)
                if j is None:
                    seen[v] = len(vox)
                    vox.append(v)
                    owner.append(bi)
                    share.append(per)
                else:
                    share[j] += per
        return (
            np.array(vox, dtype=int).reshape(-1, 3),
            np.array(owner, dtype=int),
            np.array(share, dtype=float),
        )


@dataclass(frozen=True, eq=False)
class WeightMap:
    weights: np.ndarray
    m: float
    distance_root: float
    d_max: float | np.ndarray
    distance: np.ndarray = field(repr=False, default=None)

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


def _spacing_of(mask, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if isinstance(mask, Volume):
        return mask.spacing
    return (1.0, 1.0, 1.0)


def thin(mask, spacing=None, prune: bool = True) -> Skeleton:
    """Lee 3D thinning followed by removal of short terminal spurs.

    A terminal branch is a spur when its length is below the local tube
    radius at the junction it hangs from; spurs are removed until none are
    left, so the result is a fixed point of ``thin``.
    """
    m = np.asarray(mask) > 0
    if not m.any():
        raise SkeletonError("cannot thin an empty mask")
    spacing = _spacing_of(mask, spacing)
    sk = _restore_lost(m, skeletonize(m) > 0)
    if prune:
        radius = ndi.distance_transform_edt(np.pad(m, 1), sampling=spacing)[1:-1, 1:-1, 1:-1]
        sk = _prune_spurs(sk, radius, spacing)
    return Skeleton(np.argwhere(sk), m.shape, spacing)


# skimage's Lee thinning (0.25) can erase a whole component whose cross
# section has even width (a 2x2x2 cube, a radius-3 cylinder on a half-voxel
# axis).  Such components are re-thinned with the sequential thinning below.

STRUCT6 = ndi.generate_binary_structure(3, 1)
_N18 = ndi.generate_binary_structure(3, 2)
_FACES = [(a, d) for a in range(3) for d in (-1, 1)]


def _is_simple(nb: np.ndarray) -> bool:
    """Whether deleting the centre of a 3x3x3 neighbourhood keeps topology.

    26-connected foreground, 6-connected background: exactly one foreground
    component among the 26 neighbours and exactly one background component,
    6-connected inside the 18-neighbourhood, touching the centre's faces.
    """
    fg = nb.copy()
    fg[1, 1, 1] = False
    if ndi.label(fg, STRUCT26)[1] != 1:
        return False
    bg = ~nb & _N18
    bg[1, 1, 1] = False
    lab, _ = ndi.label(bg, STRUCT6)
    touching = {lab[1 + d[0], 1 + d[1], 1 + d[2]] for d in np.argwhere(STRUCT6) - 1 if d.any()}
    touching.discard(0)
    return len(touching) == 1


def _sequential_thin(m: np.ndarray) -> np.ndarray:
    """Directional sequential thinning to a curve; keeps curve endpoints."""
    img = np.pad(m, 2)
    changed = True
    while changed:
        changed = False
        for axis, d in _FACES:
            border = img & ~np.roll(img, -d, axis=axis)
            for v in np.argwhere(border):
                x, y, z = v
                nb = img[x - 1:x + 2, y - 1:y + 2, z - 1:z + 2]
                if nb.sum() <= 2:  # endpoint or isolated voxel
                    continue
                if _is_simple(nb):
                    img[x, y, z] = False
                    changed = True
    return img[2:-2, 2:-2, 2:-2]


def _restore_lost(m: np.ndarray, sk: np.ndarray) -> np.ndarray:
    lab, n = ndi.label(m, STRUCT26)
    if n == 0:
        return sk
    kept = np.bincount(lab[sk], minlength=n + 1)
    for i, box in enumerate(ndi.find_objects(lab), start=1):
        if kept[i]:
            continue
        comp = lab[box] == i
        sk[box] |= _sequential_thin(comp)
    return sk


def _neighbor_count(sk: np.ndarray) -> np.ndarray:
    n = ndi.convolve(sk.astype(np.int16), STRUCT26.astype(np.int16), mode="constant")
    return np.where(sk, n - 1, 0)


def _prune_spurs(sk, radius, spacing):
    sk = sk.copy()
    while True:
        graph = _trace(sk, spacing)
        deg = {}
        for b in graph.branches:
            deg[b.n1] = deg.get(b.n1, 0) + 1
            deg[b.n2] = deg.get(b.n2, 0) + 1
        kinds = {n.id: n.kind for n in graph.nodes}
        removed = False
        for b in graph.branches:
            ends = (kinds[b.n1], kinds[b.n2])
            if ends.count("endpoint") != 1:
                continue
            junction = b.n1 if ends[1] == "endpoint" else b.n2
            if deg.get(junction, 0) < 3:
                continue
            jvox = graph.nodes[junction].voxel
            if b.length < radius[jvox]:
                inner = b.path[1:] if junction == b.n1 else b.path[:-1]
                sk[tuple(inner.T)] = False
                removed = True
        if not removed:
            return sk
        # removal can leave isolated junction clusters thicker than one voxel
        sk = _restore_lost(sk, skeletonize(sk) > 0)


def _trace(sk: np.ndarray, spacing) -> CenterlineGraph:
    dims = sk.shape
    spacing = np.asarray(spacing, dtype=float)
    deg = _neighbor_count(sk)
    junction = sk & (deg >= 3)
    endpoint = sk & (deg <= 1)
    jlab, nj = ndi.label(junction, STRUCT26)

    nodes: list[Node] = []
    node_of: dict[tuple, int] = {}
    for lab in range(1, nj + 1):
        members = np.argwhere(jlab == lab)
        centroid = members.mean(axis=0)
        rep = tuple(int(c) for c in members[np.argmin(((members - centroid) ** 2).sum(1))])
        nid = len(nodes)
        nodes.append(Node(nid, rep, "bifurcation"))
        for v in map(tuple, members):
            node_of[v] = nid
    for v in map(tuple, np.argwhere(endpoint)):
        nid = len(nodes)
        nodes.append(Node(nid, tuple(int(c) for c in v), "endpoint"))
        node_of[v] = nid

    def neighbors(v):
        out = []
        for o in OFFSETS26:
            u = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
            if 0 <= u[0] < dims[0] and 0 <= u[1] < dims[1] and 0 <= u[2] < dims[2] and sk[u]:
                out.append(u)
        return out

    def seglen(path):
        if len(path) < 2:
            return 0.0
        d = np.diff(np.asarray(path, dtype=float), axis=0) * spacing
        return float(np.sqrt((d**2).sum(1)).sum())

    branches: list[Branch] = []
    used_edges: set = set()
    visited_interior: set = set()
    for v, nid in sorted(node_of.items()):
        for u in neighbors(v):
            if node_of.get(u) == nid:
                continue
            if (v, u) in used_edges:
                continue
            path = [v, u]
            prev, cur = v, u
            while cur not in node_of:
                visited_interior.add(cur)
                nxt = [w for w in neighbors(cur) if w != prev]
                if not nxt:
                    break
                prev, cur = cur, nxt[0]
                path.append(cur)
            used_edges.add((v, u))
            used_edges.add((path[-1], path[-2]))
            end = node_of.get(path[-1])
            if end is None:
                continue
            branches.append(
                Branch(len(branches), nid, end, np.array(path, dtype=int), seglen(path))
            )

    # closed loops without any node
    rest = sk.copy()
    for v in list(node_of) + list(visited_interior):
        rest[v] = False
    for v in map(tuple, np.argwhere(rest)):
        if not rest[v]:
            continue
        nid = len(nodes)
        nodes.append(Node(nid, v, "bifurcation"))
        path = [v]
        prev, cur = None, v
        while True:
            rest[cur] = False
            nxt = [w for w in neighbors(cur) if w != prev and (rest[w] or w == v)]
            if not nxt or (nxt[0] == v and len(path) > 2):
                path.append(v)
                break
            prev, cur = cur, nxt[0]
            path.append(cur)
        branches.append(Branch(len(branches), nid, nid, np.array(path, dtype=int), seglen(path)))

    return CenterlineGraph(nodes, branches, dims, tuple(float(s) for s in spacing))


def parse_tree(sk: Skeleton) -> CenterlineGraph:
    """Decompose a skeleton into endpoint/bifurcation nodes and branches.

    Adjacent voxels with three or more skeleton neighbors form one
    bifurcation node; voxels with at most one neighbor are endpoints.
    """
    if len(sk) == 0:
        raise SkeletonError("empty skeleton")
    mask = sk.as_mask()
    graph = _trace(mask, sk.spacing)
    if not graph.branches and len(sk) == 1:
        v = tuple(int(c) for c in sk.voxels[0])
        graph.branches.append(Branch(0, 0, 0, np.array([v]), 0.0))
    return graph


def distance_to_centerline(mask, sk: Skeleton, spacing=None) -> np.ndarray:
    """Exact Euclidean distance (mm) from every voxel to the nearest skeleton voxel."""
    if len(sk) == 0:
        raise SkeletonError("empty skeleton")
    spacing = _spacing_of(mask, spacing) if spacing is None else spacing
    return ndi.distance_transform_edt(~sk.as_mask(), sampling=spacing)


def distance_weights(
    mask, sk: Skeleton, m: float, r_d: float, spacing=None, per_component: bool = False
) -> WeightMap:
    """Foreground weights ``1 - m * (d / d_max) ** r_d``; background weight 1.

    ``d_max`` is the largest foreground distance in the volume, or in each
    26-connected component when ``per_component`` is set.
    """
    g = np.asarray(mask) > 0
    if len(sk) == 0:
        raise SkeletonError("empty skeleton")
    spacing = _spacing_of(mask, spacing) if spacing is None else spacing
    d = distance_to_centerline(g, sk, spacing)
    d = np.where(g, d, 0.0)
    if per_component:
        lab, n = ndi.label(g, STRUCT26)
        dmax_c = np.asarray(ndi.maximum(d, lab, index=np.arange(1, n + 1)), dtype=float)
        dmax = np.concatenate([[0.0], dmax_c])[lab]
    else:
        dmax = float(d[g].max()) if g.any() else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(g & (np.asarray(dmax) > 0), d / dmax, 0.0)
    w = np.where(g, 1.0 - m * rel**r_d, 1.0)
    return WeightMap(w, float(m), float(r_d), dmax if per_component else float(dmax), d)


def branch_diameters(graph: CenterlineGraph, mask, spacing=None) -> CenterlineGraph:
    """Mean diameter per branch: twice the mean distance to background (mm)
    over the branch's centerline voxels."""
    g = np.asarray(mask) > 0
    spacing = graph.spacing if spacing is None else spacing
    # one voxel of background padding so tubes touching the border still get a radius
    edt = ndi.distance_transform_edt(np.pad(g, 1), sampling=spacing)[1:-1, 1:-1, 1:-1]
    diam = []
    for b in graph.branches:
        if len(b.path) == 0:
            diam.append(float("nan"))
            continue
        diam.append(2.0 * float(edt[tuple(b.path.T)].mean()))
    return graph.with_diameters(diam)


def write_graph(graph: CenterlineGraph, path: str | os.PathLike) -> None:
    lines = [
        f"dims {' '.join(map(str, graph.dims))}",
        f"spacing {' '.join(repr(float(s)) for s in graph.spacing)}",
    ]
    for n in graph.nodes:
        lines.append(f"node {n.id} {n.voxel[0]} {n.voxel[1]} {n.voxel[2]} {n.kind}")
    for b in graph.branches:
        gen = "" if b.generation is None else f" {b.generation}"
        lines.append(
            f"branch {b.id} {b.n1} {b.n2} {b.length!r} {b.diameter!r} {len(b.path)}{gen}"
        )
        lines.extend(f"{x} {y} {z}" for x, y, z in b.path)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(path: str | os.PathLike) -> CenterlineGraph:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    dims = (1, 1, 1)
    spacing = (1.0, 1.0, 1.0)
    nodes, branches = [], []
    i = 0
    while i < len(rows):
        r = rows[i]
        if r[0] == "dims":
            dims = tuple(int(t) for t in r[1:4])
        elif r[0] == "spacing":
            spacing = tuple(float(t) for t in r[1:4])
        elif r[0] == "node":
            nodes.append(Node(int(r[1]), (int(r[2]), int(r[3]), int(r[4])), r[5]))
        elif r[0] == "branch":
            npts = int(r[6])
            pts = np.array([[int(t) for t in rows[i + 1 + k]] for k in range(npts)], dtype=int)
            gen = int(r[7]) if len(r) > 7 else None
            branches.append(
                Branch(int(r[1]), int(r[2]), int(r[3]), pts.reshape(-1, 3), float(r[4]), float(r[5]), gen)
            )
            i += npts
        else:
            raise SkeletonError(f"unknown record {r[0]!r}")
        i += 1
    return CenterlineGraph(nodes, branches, dims, spacing)
