"""Attention ConvBlocks, group-supervised heads and the network container."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import (
    Conv3d,
    InstanceNorm,
    MaxPool,
    ReLU,
    Sigmoid,
    SpatialAttention,
    SpatialDropout,
    Upsample,
    concat,
    split,
)

ROLES = ("encoder", "bottleneck", "decoder")
SCHEMES = ("final", "deep", "per_block", "groups", "encoder_decoder")


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    cin: int
    cout: int
    stages: int = 2
    level: int = 0  # resolution level, 0 = network input resolution
    role: str = "encoder"
    skip: int | None = None  # index of an earlier block concatenated to the input

    def __post_init__(self):
        if self.stages not in (1, 2):
            raise NetError("attention stages must be 1 or 2")
        if self.role not in ROLES:
            raise NetError(f"unknown block role {self.role!r}")


@dataclass(frozen=True)
class NetSpec:
    blocks: tuple[BlockSpec, ...]
    groups: tuple[int, ...]  # block -> group id, -1 for blocks without a pyramid head
    in_channels: int = 1
    pyramid_channels: int = 2
    dropout: float = 0.0
    upsample: str = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        if not self.blocks:
            raise NetError("a net needs at least one block")
        if len(self.groups) != len(self.blocks):
            raise NetError("group partition must cover every block exactly once")
        ids = sorted(set(self.groups) - {-1})
        if not ids or ids != list(range(len(ids))):
            raise NetError(f"group ids must be 0..k-1, got {ids}")
        if self.groups[-1] == -1:
            raise NetError("the last block must belong to a group")
        if self.blocks[0].level != 0:
            raise NetError("the first block must be at level 0")
        for i, b in enumerate(self.blocks):
            cin = self.in_channels if i == 0 else self.blocks[i - 1].cout
            if i > 0 and abs(b.level - self.blocks[i - 1].level) > 1:
                raise NetError(f"block {i} jumps more than one level")
            if b.skip is not None:
                if not 0 <= b.skip < i - 1:
                    raise NetError(f"block {i} skip source must be an earlier block")
                if self.blocks[b.skip].level != b.level:
                    raise NetError(f"block {i} skip source is at a different level")
                cin += self.blocks[b.skip].cout
            if b.cin != cin:
                raise NetError(f"block {i} expects {b.cin} input channels, receives {cin}")

    @property
    def n_groups(self) -> int:
        return max(self.groups) + 1

    @property
    def depth(self) -> int:
        return max(b.level for b in self.blocks)

    def members(self, gid: int) -> list[int]:
        return [i for i, g in enumerate(self.groups) if g == gid]

    def group_order(self) -> list[int]:
        """Group ids sorted by their last member; the last one is the model output."""
        return sorted(range(self.n_groups), key=lambda g: max(self.members(g)))

    def group_side(self, gid: int) -> str:
        """'encoder' when every member is an encoding block, else 'decoder'."""
        roles = {self.blocks[i].role for i in self.members(gid)}
        return "encoder" if roles <= {"encoder", "bottleneck"} else "decoder"

    def with_scheme(self, scheme: "SupervisionScheme") -> "NetSpec":
        return replace(self, groups=tuple(scheme.partition(self)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["groups"] = list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        d["groups"] = tuple(d["groups"])
        return cls(**d)


def unet(
    channels=(4, 8, 16),
    blocks_per_level: int = 2,
    in_channels: int = 1,
    single_stage: int = 2,
    dropout: float = 0.0,
    upsample: str = "nearest",
    scheme: "SupervisionScheme | None" = None,
) -> NetSpec:
    """Encoder-decoder of attention ConvBlocks with skip concatenation.

    ``single_stage`` blocks at each end of the stack use one attention stage,
    the rest use two.  The default gives the 10-block desk net.
    """
    if blocks_per_level < 1:
        raise NetError("need at least one block per level")
    blocks = []
    cin = in_channels
    depth = len(channels) - 1
    ends = {}
    for lvl, c in enumerate(channels):
        role = "bottleneck" if lvl == depth else "encoder"
        for _ in range(blocks_per_level):
            blocks.append(dict(cin=cin, cout=c, level=lvl, role=role))
            cin = c
        ends[lvl] = len(blocks) - 1
    for lvl in range(depth - 1, -1, -1):
        c = channels[lvl]
        for j in range(blocks_per_level):
            skip = ends[lvl] if j == 0 else None
            extra = channels[lvl] if j == 0 else 0
            blocks.append(dict(cin=cin + extra, cout=c, level=lvl, role="decoder", skip=skip))
            cin = c
    n = len(blocks)
    specs = tuple(
        BlockSpec(stages=1 if (i < single_stage or i >= n - single_stage) else 2, **b)
        for i, b in enumerate(blocks)
    )
    groups = [-1] * (n - 1) + [0]
    spec = NetSpec(specs, tuple(groups), in_channels, 2, dropout, upsample)
    return spec if scheme is None else spec.with_scheme(scheme)


@dataclass(frozen=True)
class SupervisionScheme:
    """How blocks are partitioned into supervised groups.

    ``alpha_e`` / ``alpha_d`` override the Tversky-style alpha of groups whose
    members are all encoding blocks or include decoding blocks respectively.
    ``loss_weights`` scales each group's loss (default all 1).
    """

    kind: str = "groups"
    k: int = 2
    mode: str = "successive"
    alpha_e: float | None = None
    alpha_d: float | None = None
    loss_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise NetError(f"unknown supervision scheme {self.kind!r}")
        if self.mode not in ("successive", "cross"):
            raise NetError("group mode must be 'successive' or 'cross'")
        if self.kind == "groups" and self.k < 1:
            raise NetError("groups(k) needs k >= 1")

    def partition(self, spec: NetSpec) -> list[int]:
        n = len(spec.blocks)
        if self.kind == "final":
            return [-1] * (n - 1) + [0]
        if self.kind == "per_block":
            return list(range(n))
        if self.kind == "deep":
            # one head at the end of the bottleneck and of every decoder level
            heads = []
            for i, b in enumerate(spec.blocks):
                last_of_level = i == n - 1 or spec.blocks[i + 1].level != b.level
                if last_of_level and b.role != "encoder":
                    heads.append(i)
            out = [-1] * n
            for gid, i in enumerate(heads):
                out[i] = gid
            return out
        if self.kind == "encoder_decoder":
            return [0 if b.role != "decoder" else 1 for b in spec.blocks]
        if self.k > n:
            raise NetError(f"cannot split {n} blocks into {self.k} groups")
        if self.mode == "successive":
            return [g for g, part in enumerate(np.array_split(np.arange(n), self.k)) for _ in part]
        return [i % self.k for i in range(n)]

    def weights(self, n_groups: int) -> list[float]:
        if self.loss_weights is None:
            return [1.0] * n_groups
        if len(self.loss_weights) != n_groups:
            raise NetError(f"{len(self.loss_weights)} loss weights for {n_groups} groups")
        return [float(w) for w in self.loss_weights]

    def alpha_for(self, spec: NetSpec, gid: int, default: float) -> float:
        a = self.alpha_e if spec.group_side(gid) == "encoder" else self.alpha_d
        return default if a is None else a

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock:
    """Conv3-InstanceNorm-ReLU followed by one or two spatial attention stages.

    With ``head_factor`` set, the block also emits a pyramid feature: a 1x1x1
    projection of its output upsampled by ``head_factor``.
    """

    def __init__(self, cin, cout, stages=2, head_factor=None, pyramid_channels=2,
                 upsample="nearest", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = Conv3d(cin, cout, 3, rng, dtype)
        self.norm = InstanceNorm()
        self.relu = ReLU()
        self.att = [SpatialAttention(cout, rng, dtype) for _ in range(stages)]
        self.head = None
        if head_factor is not None:
            self.head = Conv3d(cout, pyramid_channels, 1, rng, dtype)
            self.up = Upsample(head_factor, upsample)

    def layers(self):
        out = [self.conv, *self.att]
        return out + [self.head] if self.head is not None else out

    def forward(self, x, with_head=True):
        f = self.relu.forward(self.norm.forward(self.conv.forward(x)))
        self.f0 = f
        for a in self.att:
            f = a.forward(f)
        fg = None
        if self.head is not None and with_head:
            fg = self.up.forward(self.head.forward(f))
        return f, fg

    def backward(self, g_fb, g_fg=None):
        g = np.zeros_like(self.f0) if g_fb is None else g_fb
        if g_fg is not None:
            g = g + self.head.backward(self.up.backward(g_fg))
        self.g_fb = g
        for a in reversed(self.att):
            g = a.backward(g)
        return self.conv.backward(self.norm.backward(self.relu.backward(g)))


def conv_block_forward(block: ConvBlock, x):
    """``(f_b, f_g)`` of one block; ``f_g`` is None for blocks without a head."""
    return block.forward(x)


class GroupHead:
    """Spatial dropout, concatenation of member pyramids, 1x1x1 conv and sigmoid."""

    def __init__(self, cin, dropout=0.0, rng=None, dtype=np.float32):
        self.drop = SpatialDropout(dropout)
        self.conv = Conv3d(cin, 1, 1, rng, dtype)
        self.sig = Sigmoid()

    def forward(self, pyramid, training=False, rng=None):
        shapes = {f.shape[1:] for f in pyramid}
        if len(shapes) != 1:
            raise NetError(f"pyramid features at different resolutions: {sorted(shapes)}")
        self.sizes = [f.shape[0] for f in pyramid]
        x = self.drop.forward(concat(pyramid), training, rng)
        return self.sig.forward(self.conv.forward(x))[0]

    def backward(self, g_prob):
        g = self.conv.backward(self.sig.backward(g_prob[None]))
        return split(self.drop.backward(g), self.sizes)


def group_predict(head: GroupHead, pyramid, training=False, rng=None) -> np.ndarray:
    return head.forward(pyramid, training, rng)


class Net:
    """Single-sample network built from a :class:`NetSpec`.

    ``forward`` returns one probability map per group, ordered by
    :meth:`NetSpec.group_order`; the last entry is the model prediction.
    """

    def __init__(self, spec: NetSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.blocks = []
        for i, b in enumerate(spec.blocks):
            head = 2**b.level if spec.groups[i] >= 0 else None
            self.blocks.append(
                ConvBlock(b.cin, b.cout, b.stages, head, spec.pyramid_channels, spec.upsample, rng, self.dtype)
            )
        self.order = spec.group_order()
        self.heads = [
            GroupHead(spec.pyramid_channels * len(spec.members(g)), spec.dropout, rng, self.dtype)
            for g in self.order
        ]
        self.pools = [MaxPool() for _ in spec.blocks]
        self.ups = [Upsample(2, "nearest") for _ in spec.blocks]
        self.zero_grad()

    # parameters -------------------------------------------------------
    def layers(self):
        out = []
        for b in self.blocks:
            out.extend(b.layers())
        out.extend(h.conv for h in self.heads)
        return out

    def named_params(self):
        out = []
        for i, b in enumerate(self.blocks):
            names = ["conv"] + [f"att{j + 1}" for j in range(len(b.att))] + (["head"] if b.head else [])
            for name, layer in zip(names, b.layers()):
                for k in ("W", "b"):
                    out.append((f"block{i}.{name}.{k}", layer, k))
        for gid, h in zip(self.order, self.heads):
            for k in ("W", "b"):
                out.append((f"group{gid}.conv.{k}", h.conv, k))
        return out

    def params(self) -> list[np.ndarray]:
        return [layer.params[k] for _, layer, k in self.named_params()]

    def grads(self) -> list[np.ndarray]:
        return [layer.grads[k] for _, layer, k in self.named_params()]

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def set_params(self, values):
        slots = self.named_params()
        if len(values) != len(slots):
            raise NetError(f"expected {len(slots)} tensors, got {len(values)}")
        for (name, layer, k), v in zip(slots, values):
            v = np.asarray(v)
            if v.shape != layer.params[k].shape:
                raise NetError(f"{name}: shape {v.shape} != {layer.params[k].shape}")
            layer.params[k][...] = v

    def astype(self, dtype) -> "Net":
        """Copy of this net with parameters cast to ``dtype``."""
        other = Net(self.spec, 0, dtype)
        other.set_params([p.astype(dtype) for p in self.params()])
        return other

    # forward / backward -----------------------------------------------
    def _input(self, i, x, outs):
        b = self.spec.blocks[i]
        if i == 0:
            return x
        prev = outs[i - 1]
        lvl = self.spec.blocks[i - 1].level
        if b.level > lvl:
            prev = self.pools[i].forward(prev)
        elif b.level < lvl:
            prev = self.ups[i].forward(prev)
        if b.skip is not None:
            prev = concat([prev, outs[b.skip]])
        return prev

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[0] != self.spec.in_channels:
            raise NetError(f"input must be ({self.spec.in_channels}, X, Y, Z), got {x.shape}")
        step = 2**self.spec.depth
        if any(n % step for n in x.shape[1:]):
            raise NetError(f"spatial dims {x.shape[1:]} must be multiples of {step}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, training=False, rng=None, heads="all") -> list[np.ndarray]:
        """Per-group probability maps.  ``heads='final'`` evaluates only the output group."""
        x = self._check_input(x)
        final_only = heads == "final"
        last = self.order[-1]
        outs, pyr = [], {}
        for i, block in enumerate(self.blocks):
            gid = self.spec.groups[i]
            want = gid >= 0 and (not final_only or gid == last)
            fb, fg = block.forward(self._input(i, x, outs), with_head=want)
            if not np.all(np.isfinite(fb)):
                raise FloatingPointError(f"non-finite activation in block {i}")
            outs.append(fb)
            if fg is not None:
                pyr[i] = fg
        self.outputs = outs
        probs = []
        for gid, head in zip(self.order, self.heads):
            if final_only and gid != last:
                continue
            p = head.forward([pyr[i] for i in self.spec.members(gid)], training, rng)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite prediction in group {gid}")
            probs.append(p)
        return probs

    def predict(self, x) -> np.ndarray:
        """Model output: the last group's probability map, without dropout."""
        return self.forward(x, training=False, heads="final")[-1]

    def backward(self, prob_grads):
        """Back-propagate ``dL/dP`` per group (ordered like ``forward``'s output).

        ``None`` entries skip a group.  Parameter gradients accumulate.
        """
        if len(prob_grads) != len(self.heads):
            raise NetError(f"{len(prob_grads)} gradients for {len(self.heads)} groups")
        g_fg = {}
        for gid, head, gp in zip(self.order, self.heads, prob_grads):
            if gp is None:
                continue
            for i, g in zip(self.spec.members(gid), head.backward(gp.astype(self.dtype, copy=False))):
                g_fg[i] = g
        n = len(self.blocks)
        g_out = [None] * n
        self.block_grads = g_out
        for i in range(n - 1, -1, -1):
            b = self.spec.blocks[i]
            if g_out[i] is None and i not in g_fg:
                continue
            dx = self.blocks[i].backward(g_out[i], g_fg.get(i))
            if i == 0:
                self.input_grad = dx
                continue
            if b.skip is not None:
                dx, dskip = split(dx, [self.spec.blocks[i - 1].cout, self.spec.blocks[b.skip].cout])
                g_out[b.skip] = dskip if g_out[b.skip] is None else g_out[b.skip] + dskip
            lvl = self.spec.blocks[i - 1].level
            if b.level > lvl:
                dx = self.pools[i].backward(dx)
            elif b.level < lvl:
                dx = self.ups[i].backward(dx)
            g_out[i - 1] = dx if g_out[i - 1] is None else g_out[i - 1] + dx


# checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"GSNET"
CHECKPOINT_VERSION = 1


def write_checkpoint(net: Net, path, extra: dict | None = None) -> None:
    """Versioned binary: JSON NetSpec block, then each tensor as shape + f32 LE."""
    meta = {"spec": net.spec.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    params = net.params()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[Net, dict]:
    """Rebuild a float32 net from a checkpoint; returns ``(net, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise NetError(f"{path}: not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise NetError(f"{path}: truncated tensor data")
        tensors.append(np.frombuffer(data, "<f4", int(np.prod(shape)), pos).reshape(shape))
        pos += size
    if pos != len(data):
        raise NetError(f"{path}: {len(data) - pos} trailing bytes")
    net = Net(NetSpec.from_dict(meta["spec"]))
    net.set_params(tensors)
    return net, meta.get("extra", {})
