"""3D scalar volumes, the AVOL file format and CT intensity preprocessing.

A :class:`Volume` wraps a numpy array of shape ``(nx, ny, nz)`` together with
its physical voxel spacing (mm) and an element kind that fixes the admissible
value range:

* ``intensity``   -- any finite float
* ``probability`` -- floats in ``[0, 1]``
* ``binary``      -- values in ``{0, 1}``

AVOL layout (all header lines ASCII, newline terminated)::

    AVOL 1
    dims nx ny nz
    spacing sx sy sz
    kind intensity|probability|binary
    data raw-le f32|u8
    <blank line>
    <raw little-endian payload, x fastest>
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

KINDS = ("intensity", "probability", "binary")
MAGIC = "AVOL 1"

HU_MIN = -1000.0
HU_MAX = 600.0


class VolumeError(ValueError):
    """Raised for malformed volumes or AVOL files."""


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume must be 3D with dims >= 1, got shape {data.shape}")
        if self.kind not in KINDS:
            raise VolumeError(f"unknown kind {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind == "binary":
            if not np.all((data == 0) | (data == 1)):
                raise VolumeError("binary volume has values outside {0, 1}")
            data = data.astype(np.uint8)
        else:
            data = data.astype(np.float32)
            if not np.all(np.isfinite(data)):
                raise VolumeError("volume contains non-finite values")
            if self.kind == "probability" and (data.min() < 0 or data.max() > 1):
                raise VolumeError("probability value outside [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __array__(self, dtype=None, copy=None):
        if dtype is None and not copy:
            return self.data
        return self.data.astype(dtype or self.data.dtype)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def with_data(self, data, kind: str | None = None) -> "Volume":
        """Same geometry, new payload."""
        return Volume(data, self.spacing, kind or self.kind)


def write_volume(v: Volume, path: str | os.PathLike) -> None:
    if not isinstance(v, Volume):
        raise TypeError("write_volume expects a Volume")
    if v.kind == "binary":
        payload = np.asarray(v.data, dtype="<u1")
        code = "u8"
    else:
        payload = np.asarray(v.data, dtype="<f4")
        code = "f32"
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    header = (
        f"{MAGIC}\n"
        f"dims {nx} {ny} {nz}\n"
        f"spacing {sx!r} {sy!r} {sz!r}\n"
        f"kind {v.kind}\n"
        f"data raw-le {code}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes(order="F"))


def _expect(line: bytes, key: str, n: int) -> list[str]:
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) != n + 1 or parts[0] != key:
        raise VolumeError(f"malformed header line {line!r}, expected '{key}' with {n} values")
    return parts[1:]


def read_volume(path: str | os.PathLike) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n", 6)
    if len(lines) < 7 or lines[0] != MAGIC.encode():
        raise VolumeError("not an AVOL file (bad magic)")
    try:
        dims = tuple(int(t) for t in _expect(lines[1], "dims", 3))
        spacing = tuple(float(t) for t in _expect(lines[2], "spacing", 3))
    except ValueError as exc:
        raise VolumeError(f"malformed header: {exc}") from None
    (kind,) = _expect(lines[3], "kind", 1)
    enc, code = _expect(lines[4], "data", 2)
    if enc != "raw-le" or code not in ("f32", "u8"):
        raise VolumeError(f"unsupported data encoding {enc} {code}")
    if lines[5] != b"":
        raise VolumeError("missing blank line after header")
    if kind not in KINDS:
        raise VolumeError(f"unknown kind {kind!r}")
    if min(dims) < 1:
        raise VolumeError(f"invalid dims {dims}")
    dtype = np.dtype("<u1") if code == "u8" else np.dtype("<f4")
    body = lines[6]
    n = dims[0] * dims[1] * dims[2]
    if len(body) != n * dtype.itemsize:
        raise VolumeError(
            f"length mismatch: dims {dims} need {n} values, payload has {len(body) / dtype.itemsize:g}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(dims, order="F")
    return Volume(np.array(data, dtype=dtype.newbyteorder("=")), spacing, kind)


def preprocess_ct(v: Volume, mask: Volume | np.ndarray | None = None) -> Volume:
    """Clamp to [-1000, 600] HU and rescale affinely to [0, 255].

    Output stays float (no quantization).  Voxels outside an optional binary
    ``mask`` are set to the maximal intensity 255.
    """
    x = np.asarray(v, dtype=np.float64)
    out = (np.clip(x, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) * 255.0
    if mask is not None:
        out = np.where(np.asarray(mask) > 0, out, 255.0)
    return Volume(out.astype(np.float32), v.spacing, "intensity")
