"""Bit-exact volume file I/O.

Two formats are supported:

* A NIfTI-1 single-file subset: 348-byte header, magic ``n+1``, little
  endian, dtypes float32/int16/uint8, no extensions, no compression.
  Orientation metadata beyond ``pixdim`` is ignored.
* A raw sidecar format for float32 grids: ``<name>.json`` holding
  ``{dims, spacing, dtype: "f32", order: "x-fastest"}`` plus
  ``<name>.bin`` with the little-endian payload.

Payloads are serialized x-fastest (see :mod:`countervox.grid`), matching
the NIfTI voxel ordering, so write-then-read round trips are bit exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import FIRST_ROI, LabelVolume, ProbabilityVolume, VoxelGrid

__all__ = [
    "VolumeIOError",
    "BadMagicError",
    "UnsupportedDtypeError",
    "TruncatedPayloadError",
    "read_volume",
    "write_volume",
    "save_probability",
    "load_probability",
]


class VolumeIOError(Exception):
    """Base class for volume file errors."""


class BadMagicError(VolumeIOError):
    """The file does not carry the expected NIfTI-1 magic."""


class UnsupportedDtypeError(VolumeIOError):
    """The on-disk datatype code is outside the supported subset."""


class TruncatedPayloadError(VolumeIOError):
    """Header or voxel payload is shorter than the header promises."""


HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

# NIfTI-1 datatype codes.
_DTYPE_CODES = {
    2: np.dtype("<u1"),   # uint8
    4: np.dtype("<i2"),   # int16
    16: np.dtype("<f4"),  # float32
}
_CODE_FOR_DTYPE = {"uint8": 2, "int16": 4, "float32": 16}


def _pack_header(dims, spacing, code: int, bitpix: int) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = (3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    pixdim = (1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr)


def _write_nifti(path: Path, data: np.ndarray, spacing) -> None:
    code = _CODE_FOR_DTYPE[data.dtype.name]
    payload = data.ravel(order="F").astype(data.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(_pack_header(data.shape, spacing, code, data.dtype.itemsize * 8))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(payload)


def _read_nifti(path: Path):
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than the 348-byte header")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic.rstrip(b"\x00") != b"n+1":
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise BadMagicError(f"{path}: sizeof_hdr={sizeof_hdr}, not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise VolumeIOError(f"{path}: only 3D volumes supported, dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise VolumeIOError(f"{path}: nonpositive dims {dims}")
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"{path}: datatype code {code} not in supported subset")
    dtype = _DTYPE_CODES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    if vox_offset < HEADER_SIZE:
        vox_offset = VOX_OFFSET
    n = dims[0] * dims[1] * dims[2]
    payload = raw[vox_offset:vox_offset + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header promises {n * dtype.itemsize}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if code == 16:
        return VoxelGrid(values.astype(np.float64), spacing)
    labels = values.astype(np.int32)
    num_rois = max(0, int(labels.max()) - (FIRST_ROI - 1))
    return LabelVolume(labels, spacing, num_rois)


def _raw_paths(path: Path) -> tuple[Path, Path]:
    return path, path.with_suffix(".bin")


def _write_raw(path: Path, grid: VoxelGrid) -> None:
    json_path, bin_path = _raw_paths(path)
    header = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": "f32",
        "order": "x-fastest",
    }
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    payload = grid.values.ravel(order="F").astype("<f4").tobytes()
    bin_path.write_bytes(payload)


def _read_raw(path: Path) -> VoxelGrid:
    json_path, bin_path = _raw_paths(path)
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"{json_path}: invalid JSON header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise UnsupportedDtypeError(f"{json_path}: dtype {header.get('dtype')!r}, expected 'f32'")
    if header.get("order", "x-fastest") != "x-fastest":
        raise VolumeIOError(f"{json_path}: unsupported order {header.get('order')!r}")
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    n = dims[0] * dims[1] * dims[2]
    if not bin_path.exists():
        raise TruncatedPayloadError(f"{bin_path}: payload file missing")
    payload = bin_path.read_bytes()
    if len(payload) < 4 * n:
        raise TruncatedPayloadError(
            f"{bin_path}: payload holds {len(payload)} bytes, header promises {4 * n}"
        )
    values = np.frombuffer(payload[: 4 * n], dtype="<f4").reshape(dims, order="F")
    return VoxelGrid(values.astype(np.float64), spacing)


def read_volume(path) -> VoxelGrid | LabelVolume:
    """Read a volume file, dispatching on the extension.

    ``.nii`` files yield a :class:`VoxelGrid` for float32 payloads and a
    :class:`LabelVolume` for integer payloads (the declared ROI count is
    inferred from the largest label present). ``.json`` files are read as
    the raw float32 sidecar format.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".json":
        return _read_raw(path)
    return _read_nifti(path)


def write_volume(volume: VoxelGrid | LabelVolume, path, dtype: str | None = None) -> None:
    """Write a volume, dispatching on the extension.

    ``.nii`` stores a VoxelGrid as float32 and a LabelVolume as ``int16``
    by default (``dtype="uint8"`` is allowed when labels fit). ``.json``
    stores a VoxelGrid in the raw float32 sidecar format.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        if not isinstance(volume, VoxelGrid):
            raise ValueError("raw sidecar format stores float32 grids only")
        _write_raw(path, volume)
        return
    if isinstance(volume, VoxelGrid):
        dtype = dtype or "float32"
        if dtype != "float32":
            raise ValueError(f"VoxelGrid must be written as float32, got {dtype!r}")
        _write_nifti(path, volume.values.astype("<f4"), volume.spacing)
    elif isinstance(volume, LabelVolume):
        dtype = dtype or "int16"
        if dtype not in ("int16", "uint8"):
            raise ValueError(f"LabelVolume dtype must be int16 or uint8, got {dtype!r}")
        labels = volume.labels
        if dtype == "uint8" and labels.max() > 255:
            raise ValueError("labels exceed uint8 range")
        if dtype == "int16" and labels.max() > 32767:
            raise ValueError("labels exceed int16 range")
        _write_nifti(path, labels.astype(f"<{'u1' if dtype == 'uint8' else 'i2'}"), volume.spacing)
    else:
        raise ValueError(f"cannot write object of type {type(volume).__name__}")


def save_probability(probs: ProbabilityVolume, path) -> None:
    """Store a probability volume as a compressed ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        probs=probs.probs,
        spacing=np.asarray(probs.spacing),
        num_rois=np.asarray(probs.num_rois),
    )


def load_probability(path) -> ProbabilityVolume:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with np.load(path) as data:
        return ProbabilityVolume(
            data["probs"],
            tuple(float(s) for s in data["spacing"]),
            int(data["num_rois"]),
        )
