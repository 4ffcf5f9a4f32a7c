"""Volume data model, intensity normalization, moving-window split/merge, and on-disk formats.

A volume is a single-channel 3D intensity grid (H, W, D).  Harmonization
operates on depth windows which are merged back after inference; overlapping
slices are combined by the unweighted mean.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateVolume,
    FormatError,
    InconsistentWindowSet,
    InvalidPlan,
)

RAW_DTYPE = np.dtype("<f4")

# NIfTI-1 datatype codes we accept (single-file .nii, no extensions needed).
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


@dataclass(frozen=True)
class Volume:
    """One-channel 3D intensity grid with source metadata.

    Intensities must be finite and non-negative; when ``normalized`` is set
    they must lie in [0, 1].
    """

    data: np.ndarray
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must be finite")
        if arr.min() < 0:
            raise ValueError("volume intensities must be non-negative")
        if self.normalized and arr.max() > 1.0:
            raise ValueError("normalized volume must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, normalized: bool | None = None) -> "Volume":
        """New volume with the same metadata and replaced intensity grid."""
        return Volume(data, self.normalized if normalized is None else normalized, dict(self.meta))


@dataclass(frozen=True)
class WindowPlan:
    """Moving-window decomposition along the depth axis."""

    window_size: int
    stride: int
    axis: str = "depth"
    pad_policy: str = "reflect"

    def __post_init__(self):
        if self.axis != "depth":
            raise InvalidPlan(f"unsupported window axis {self.axis!r}")
        if self.window_size < 1 or self.stride < 1:
            raise InvalidPlan("window_size and stride must be >= 1")
        if self.stride > self.window_size:
            raise InvalidPlan("stride > window_size cannot cover every slice")
        if self.pad_policy not in ("reflect", "zero"):
            raise InvalidPlan(f"unknown pad policy {self.pad_policy!r}")


@dataclass(frozen=True)
class WindowSet:
    """Ordered depth windows of one volume plus the offsets to merge them back."""

    windows: tuple[Volume, ...]
    offsets: tuple[int, ...]
    original_shape: tuple[int, int, int]

    def __post_init__(self):
        if len(self.windows) != len(self.offsets):
            raise InconsistentWindowSet("offsets and windows differ in length")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise InconsistentWindowSet("offsets must be strictly increasing")


def normalize(v: Volume) -> Volume:
    """Min-max rescale intensities to [0, 1] and set the normalized flag.

    Monotone and idempotent: the output has min 0 and max 1, so a second
    application is the identity.
    """
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi <= lo:
        raise DegenerateVolume("cannot normalize a constant volume")
    data = (v.data - lo) / (hi - lo)
    return Volume(data, normalized=True, meta=dict(v.meta))


def window_offsets(depth: int, window_size: int, stride: int) -> list[int]:
    """Start indices covering [0, depth) with the last window clamped to the end."""
    if window_size > depth:
        raise InvalidPlan(f"window_size {window_size} exceeds depth {depth}")
    offsets = list(range(0, depth - window_size + 1, stride))
    if offsets[-1] + window_size < depth:
        offsets.append(depth - window_size)
    return offsets


def split_windows(v: Volume, plan: WindowPlan) -> WindowSet:
    """Decompose a volume into depth windows per the plan.

    If the volume is shallower than the window, the depth axis is padded
    (reflect or zero) up to one full window.
    """
    data = v.data
    depth = data.shape[2]
    if plan.window_size > depth:
        pad = plan.window_size - depth
        if plan.pad_policy == "reflect" and depth < 2:
            raise InvalidPlan("reflect padding needs depth >= 2")
        mode = "reflect" if plan.pad_policy == "reflect" else "constant"
        if mode == "reflect" and pad > depth - 1:
            raise InvalidPlan("reflect padding cannot extend depth this far")
        data = np.pad(data, ((0, 0), (0, 0), (0, pad)), mode=mode)
    offsets = window_offsets(data.shape[2], plan.window_size, plan.stride)
    windows = tuple(
        v.with_data(data[:, :, o : o + plan.window_size]) for o in offsets
    )
    return WindowSet(windows=windows, offsets=tuple(offsets), original_shape=v.shape)


def merge_windows(ws: WindowSet) -> Volume:
    """Reassemble a volume from depth windows, averaging overlapping slices."""
    if not ws.windows:
        raise InconsistentWindowSet("empty window set")
    h, w, depth = ws.original_shape
    wsize = ws.windows[0].shape[2]
    padded_depth = max(depth, ws.offsets[-1] + wsize)
    acc = np.zeros((h, w, padded_depth), dtype=np.float64)
    hits = np.zeros(padded_depth, dtype=np.int64)
    for vol, off in zip(ws.windows, ws.offsets):
        if vol.shape[0] != h or vol.shape[1] != w or vol.shape[2] != wsize:
            raise InconsistentWindowSet(f"window shape {vol.shape} inconsistent with set")
        if off + wsize > padded_depth:
            raise InconsistentWindowSet("window extends past the padded depth")
        acc[:, :, off : off + wsize] += vol.data
        hits[off : off + wsize] += 1
    if np.any(hits[:depth] == 0):
        raise InconsistentWindowSet("windows do not cover every slice")
    merged = (acc[:, :, :depth] / hits[:depth]).astype(np.float32)
    first = ws.windows[0]
    return Volume(merged, normalized=first.normalized, meta=dict(first.meta))


def save_volume(v: Volume, path) -> None:
    """Write the raw format: one JSON header line, then little-endian float32 voxels."""
    header = {"shape": list(v.shape), "meta": v.meta, "normalized": v.normalized}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(v.data, dtype=RAW_DTYPE).tobytes())


def load_volume(path) -> Volume:
    """Read the raw format written by :func:`save_volume`."""
    with open(path, "rb") as f:
        line = f.readline()
        if not line.endswith(b"\n"):
            raise FormatError("missing header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed header: {exc}") from exc
        if not isinstance(header, dict) or "shape" not in header:
            raise FormatError("header must be a JSON object with a 'shape' key")
        shape = header["shape"]
        if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s >= 1 for s in shape)):
            raise FormatError(f"bad shape in header: {shape!r}")
        expected = int(np.prod(shape)) * RAW_DTYPE.itemsize
        blob = f.read()
        if len(blob) != expected:
            raise FormatError(f"voxel block has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=RAW_DTYPE).reshape(shape)
    return Volume(data.copy(), normalized=bool(header.get("normalized", False)), meta=dict(header.get("meta", {})))


def load_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume (.nii or .nii.gz; uint8/int16/float32)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise FormatError("truncated NIfTI header")
        sizeof_hdr = struct.unpack("<i", hdr[0:4])[0]
        if sizeof_hdr == 348:
            end = "<"
        elif struct.unpack(">i", hdr[0:4])[0] == 348:
            end = ">"
        else:
            raise FormatError("not a NIfTI-1 file (bad sizeof_hdr)")
        magic = hdr[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise FormatError(f"bad NIfTI magic {magic!r}")
        dim = struct.unpack(end + "8h", hdr[40:56])
        if dim[0] < 3:
            raise FormatError(f"need a 3D NIfTI volume, got ndim {dim[0]}")
        shape = dim[1:4]
        if any(s < 1 for s in shape) or any(d > 1 for d in dim[4 : dim[0] + 1]):
            raise FormatError(f"unsupported NIfTI dims {dim!r}")
        datatype = struct.unpack(end + "h", hdr[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise FormatError(f"unsupported NIfTI datatype code {datatype}")
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(end)
        vox_offset = int(struct.unpack(end + "f", hdr[108:112])[0])
        scl_slope = struct.unpack(end + "f", hdr[112:116])[0]
        scl_inter = struct.unpack(end + "f", hdr[116:120])[0]
        f.seek(vox_offset)
        count = int(np.prod(shape))
        blob = f.read(count * dtype.itemsize)
        if len(blob) != count * dtype.itemsize:
            raise FormatError("truncated NIfTI voxel block")
    # NIfTI stores x fastest (Fortran order).
    data = np.frombuffer(blob, dtype=dtype).reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    return Volume(data, normalized=False, meta={"source": str(path)})
