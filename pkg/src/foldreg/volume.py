"""3D volume containers and file I/O.

Conventions used throughout the package:

* A volume of dims ``(nx, ny, nz)`` is a numpy array indexed ``data[i, j, k]``
  with ``i`` along x. On disk the linear order is x-fastest (Fortran order),
  matching the NIfTI-1 layout.
* Displacements are stored in voxel units. Channel ``c`` of a field is the
  displacement along axis ``c``.
* Native container "FRV1": 28-byte header (magic ``FRV1``, payload kind u32,
  nx/ny/nz u32, channel count u32, element-type code u32), then the
  channel-major little-endian payload (float32, or int32 for labels).
* NIfTI-1 support is read-only: single-file uncompressed ``.nii``,
  little-endian, element kinds uint8/int16/int32/float32/float64. Spatial
  metadata beyond the dims is ignored; images are assumed pre-aligned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INTENSITY = "intensity"
LABEL = "label"

_MAGIC = b"FRV1"
_KIND_INTENSITY = 0
_KIND_LABEL = 1
_KIND_DISPLACEMENT = 2
_ELEM_F32 = 0
_ELEM_I32 = 1
_HEADER = struct.Struct("<4sIIIIII")  # 28 bytes

_NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}


class FormatError(ValueError):
    """Malformed or unsupported volume/checkpoint file."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.setflags(write=False)
    return view


@dataclass(frozen=True)
class Volume:
    """A single-channel 3D scalar field, either intensities or a label mask.

    Intensity data is float32 (float64 is accepted for verification work);
    label data is int32 with non-negative values. Instances are immutable.
    """

    data: np.ndarray
    kind: str = INTENSITY

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if self.kind == LABEL:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("label volumes require an integer dtype")
            arr = arr.astype(np.int32, copy=False)
            if arr.size and arr.min() < 0:
                raise ValueError("label volumes must be non-negative")
        elif self.kind == INTENSITY:
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement u(x) in voxel units, shape (3, nx, ny, nz).

    The deformed sampling position for voxel x is x + u(x). All components
    must be finite.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"field data must have shape (3, nx, ny, nz), got {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise ValueError("displacement field contains NaN or Inf")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])


def zero_field(dims, dtype=np.float32) -> DisplacementField:
    return DisplacementField(np.zeros((3, *dims), dtype=dtype))


def normalize_intensity(v: Volume) -> Volume:
    """Divide by the maximum voxel so the output peaks at exactly 1."""
    if v.kind != INTENSITY:
        raise ValueError("normalize_intensity expects an intensity volume")
    peak = v.data.max()
    if peak <= 0:
        raise ValueError("degenerate intensity range: maximum voxel is not positive")
    return Volume(v.data / peak, INTENSITY)


def center_crop(v: Volume, target) -> Volume:
    """Extract the centered subvolume of the given target dims.

    Per axis the low offset is floor((n - t) / 2); odd remainders trim the
    extra voxel from the high side.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError("crop target must have 3 components")
    dims = v.dims
    if any(t < 1 or t > n for t, n in zip(target, dims)):
        raise ValueError(f"crop target {target} exceeds volume dims {dims}")
    off = [(n - t) // 2 for n, t in zip(dims, target)]
    sl = tuple(slice(o, o + t) for o, t in zip(off, target))
    return Volume(v.data[sl].copy(), v.kind)


def crop_field(u: DisplacementField, target) -> DisplacementField:
    """Center-crop a displacement field with the same offset rule as volumes."""
    target = tuple(int(t) for t in target)
    dims = u.dims
    if any(t < 1 or t > n for t, n in zip(target, dims)):
        raise ValueError(f"crop target {target} exceeds field dims {dims}")
    off = [(n - t) // 2 for n, t in zip(dims, target)]
    sl = (slice(None),) + tuple(slice(o, o + t) for o, t in zip(off, target))
    return DisplacementField(u.data[sl].copy())


# ---------------------------------------------------------------------------
# FRV1 container


def _frv_bytes_volume(v: Volume) -> bytes:
    if v.kind == LABEL:
        kind_code, elem_code = _KIND_LABEL, _ELEM_I32
        payload = v.data.astype("<i4", copy=False)
    else:
        if v.data.dtype != np.float32:
            raise TypeError("save requires float32 intensity data; cast explicitly")
        kind_code, elem_code = _KIND_INTENSITY, _ELEM_F32
        payload = v.data.astype("<f4", copy=False)
    nx, ny, nz = v.dims
    header = _HEADER.pack(_MAGIC, kind_code, nx, ny, nz, 1, elem_code)
    return header + payload.ravel(order="F").tobytes()


def save_volume(v: Volume, path) -> None:
    Path(path).write_bytes(_frv_bytes_volume(v))


def save_field(u: DisplacementField, path) -> None:
    if u.data.dtype != np.float32:
        raise TypeError("save requires float32 field data; cast explicitly")
    nx, ny, nz = u.dims
    header = _HEADER.pack(_MAGIC, _KIND_DISPLACEMENT, nx, ny, nz, 3, _ELEM_F32)
    payload = b"".join(u.data[c].astype("<f4", copy=False).ravel(order="F").tobytes() for c in range(3))
    Path(path).write_bytes(header + payload)


def _parse_frv(buf: bytes, path):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated FRV1 header")
    magic, kind_code, nx, ny, nz, channels, elem_code = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)}")
    if elem_code not in (_ELEM_F32, _ELEM_I32):
        raise FormatError(f"{path}: unsupported element kind {elem_code}")
    dtype = np.dtype("<f4") if elem_code == _ELEM_F32 else np.dtype("<i4")
    count = nx * ny * nz * channels
    expected = _HEADER.size + count * 4
    if len(buf) != expected:
        raise FormatError(f"{path}: payload size mismatch (expected {expected} bytes, got {len(buf)})")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEADER.size)
    return kind_code, (nx, ny, nz), channels, flat


def load_volume(path) -> Volume:
    """Load a single-channel FRV1 volume or an uncompressed NIfTI-1 file."""
    buf = Path(path).read_bytes()
    if buf[:4] == _MAGIC:
        kind_code, dims, channels, flat = _parse_frv(buf, path)
        if kind_code == _KIND_DISPLACEMENT or channels != 1:
            raise FormatError(f"{path}: holds a displacement field; use load_field")
        data = flat.reshape(dims, order="F")
        if kind_code == _KIND_LABEL:
            return Volume(data.astype(np.int32), LABEL)
        return Volume(data.astype(np.float32), INTENSITY)
    return _load_nifti(buf, path)


def load_field(path) -> DisplacementField:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic (not an FRV1 file)")
    kind_code, dims, channels, flat = _parse_frv(buf, path)
    if kind_code != _KIND_DISPLACEMENT or channels != 3:
        raise FormatError(f"{path}: not a displacement field")
    per = dims[0] * dims[1] * dims[2]
    chans = [flat[c * per:(c + 1) * per].reshape(dims, order="F") for c in range(3)]
    return DisplacementField(np.stack(chans).astype(np.float32))


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 reader


def _load_nifti(buf: bytes, path, kind: str = INTENSITY) -> Volume:
    if len(buf) < 348:
        raise FormatError(f"{path}: bad magic/header (file shorter than a NIfTI-1 header)")
    sizeof_hdr = struct.unpack_from("<i", buf, 0)[0]
    if sizeof_hdr != 348:
        if sizeof_hdr == 1543569408:  # 348 byte-swapped
            raise FormatError(f"{path}: big-endian NIfTI is unsupported")
        raise FormatError(f"{path}: bad magic/header (sizeof_hdr={sizeof_hdr})")
    magic = buf[344:348]
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file NIfTI (.hdr/.img) is unsupported")
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic/header (magic={magic!r})")
    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: bad magic/header (dim[0]={ndim})")
    shape = [max(int(d), 1) for d in dim[1:4]]
    extra = [int(d) for d in dim[4:1 + ndim]]
    if ndim > 3 and any(d > 1 for d in extra):
        raise FormatError(f"{path}: only scalar 3D volumes are supported (dim={dim[:1 + ndim]})")
    datatype = struct.unpack_from("<h", buf, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported element kind (datatype={datatype})")
    dtype = _NIFTI_DTYPES[datatype]
    vox_offset = int(struct.unpack_from("<f", buf, 108)[0])
    if vox_offset < 348:
        raise FormatError(f"{path}: bad magic/header (vox_offset={vox_offset})")
    count = shape[0] * shape[1] * shape[2]
    if len(buf) < vox_offset + count * dtype.itemsize:
        raise FormatError(f"{path}: payload size mismatch")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=vox_offset)
    data = flat.reshape(shape, order="F")
    if kind == LABEL:
        if not np.issubdtype(dtype, np.integer):
            raise FormatError(f"{path}: label load requires an integer element kind")
        return Volume(data.astype(np.int32), LABEL)
    return Volume(data.astype(np.float32), INTENSITY)


def load_nifti(path, kind: str = INTENSITY) -> Volume:
    """Load a NIfTI-1 file explicitly, optionally as labels."""
    return _load_nifti(Path(path).read_bytes(), path, kind=kind)
