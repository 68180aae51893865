"""Minimal NIfTI-1 reader/writer for .nii / .nii.gz volumes.

Covers what the pipeline needs: single-file NIfTI-1 ("n+1"), 3D grids (or 4D
with a singleton fourth axis), voxel spacing from pixdim, and scl_slope/inter
rescaling on read.  Arrays are exchanged in (z, y, x) axis order; on disk NIfTI
stores x-fastest, so we transpose at the boundary.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


class NiftiError(ValueError):
    pass


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a volume, returning (data[z, y, x], spacing (z, y, x) in mm)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise NiftiError(f"{path}: truncated header")
        sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: not a little-endian NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
        if header[344:348] != MAGIC:
            raise NiftiError(f"{path}: unsupported magic {header[344:348]!r} (need single-file n+1)")
        dim = struct.unpack_from("<8h", header, 40)
        ndim = dim[0]
        if ndim < 3 or any(d > 1 for d in dim[4 : 1 + ndim]):
            raise NiftiError(f"{path}: expected a 3D volume, got dim={dim}")
        shape_xyz = tuple(int(d) for d in dim[1:4])
        datatype, _bitpix = struct.unpack_from("<2h", header, 70)
        if datatype not in _DTYPE_CODES:
            raise NiftiError(f"{path}: unsupported datatype code {datatype}")
        pixdim = struct.unpack_from("<8f", header, 76)
        spacing_xyz = tuple(float(p) for p in pixdim[1:4])
        if any(not np.isfinite(s) or s <= 0 for s in spacing_xyz):
            raise NiftiError(f"{path}: missing or non-positive voxel spacing {spacing_xyz}")
        vox_offset = struct.unpack_from("<f", header, 108)[0]
        scl_slope, scl_inter = struct.unpack_from("<2f", header, 112)
        f.seek(int(vox_offset))
        dtype = np.dtype(_DTYPE_CODES[datatype])
        count = int(np.prod(shape_xyz))
        raw = f.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise NiftiError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape_xyz, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    # x-fastest on disk -> (z, y, x) in memory
    data = np.ascontiguousarray(data.transpose(2, 1, 0))
    spacing_zyx = (spacing_xyz[2], spacing_xyz[1], spacing_xyz[0])
    return data, spacing_zyx


def write_nifti(path: str | Path, data: np.ndarray, spacing: tuple[float, float, float]):
    """Write data[z, y, x] with spacing (z, y, x) mm as a single-file NIfTI-1."""
    path = Path(path)
    if data.ndim != 3:
        raise NiftiError(f"expected 3D data, got shape {data.shape}")
    if any(s <= 0 for s in spacing):
        raise NiftiError(f"spacing must be positive, got {spacing}")
    dtype = np.dtype(data.dtype)
    if dtype not in _CODE_FOR_DTYPE:
        if np.issubdtype(dtype, np.integer):
            data, dtype = data.astype(np.int32), np.dtype(np.int32)
        else:
            data, dtype = data.astype(np.float32), np.dtype(np.float32)
    sz, sy, sx = (float(s) for s in spacing)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, data.shape[2], data.shape[1], data.shape[0], 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, _CODE_FOR_DTYPE[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", header, 252, 0, 1)  # sform only
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, 0.0)
    header[344:348] = MAGIC
    payload = np.asfortranarray(data.transpose(2, 1, 0)).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)  # extension flag
        f.write(payload)
