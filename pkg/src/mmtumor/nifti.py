"""Minimal NIfTI-1 reader/writer for scalar 3D volumes.

Only the header fields this pipeline relies on are handled: dims, datatype,
pixdim, vox_offset and scl slope/intercept. Files ending in .gz are
transparently gzip-compressed. Data is written in Fortran voxel order with
dim = (W, H, D) so arrays of shape (D, H, W) serialize as raw C-order bytes.
"""

import gzip
import os
import struct

import numpy as np

from .errors import IoFailureError, MalformedHeaderError, MissingFileError, NonScalarVolumeError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.float32): 16, np.dtype(np.float64): 64}


def _open_read(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path):
    """Read a scalar 3D NIfTI-1 file.

    Returns (data, spacing) where data is a (D, H, W) array and spacing is
    the (pixdim1, pixdim2, pixdim3) triple as stored in the header.
    """
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        with _open_read(path) as f:
            raw = f.read()
    except OSError as e:
        raise MalformedHeaderError(f"unreadable file {path}: {e}") from e
    if len(raw) < HEADER_SIZE:
        raise MalformedHeaderError(f"file too short for a NIfTI-1 header: {path}")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise MalformedHeaderError(f"bad sizeof_hdr in {path}")
        order = ">"
    if raw[344:347] != MAGIC[:3]:
        raise MalformedHeaderError(f"missing NIfTI-1 magic in {path}")

    dim = struct.unpack_from(order + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(order + "2h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)

    ndim = dim[0]
    if ndim != 3:
        if ndim < 1 or ndim > 7:
            raise MalformedHeaderError(f"implausible dim[0]={ndim} in {path}")
        raise NonScalarVolumeError(ndim)
    if datatype not in _DTYPES:
        raise MalformedHeaderError(f"unsupported datatype code {datatype} in {path}")

    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise MalformedHeaderError(f"non-positive dims {dim[1:4]} in {path}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = nx * ny * nz
    start = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    payload = raw[start:start + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise MalformedHeaderError(f"truncated voxel payload in {path}")
    # Fortran order with x fastest == C-order array of shape (z, y, x)
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    return data, spacing


def write_nifti(path, data, spacing):
    """Write a (D, H, W) array as a scalar 3D NIfTI-1 file.

    float32/float64/uint8 payloads are written verbatim (no scaling), so
    round-trips are bit-exact.
    """
    data = np.asarray(data)
    if data.ndim != 3:
        raise NonScalarVolumeError(data.ndim)
    dtype = np.dtype(data.dtype)
    if dtype not in _CODES:
        data = data.astype(np.float32)
        dtype = np.dtype(np.float32)
    nz, ny, nx = data.shape

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = MAGIC

    blob = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + np.ascontiguousarray(data).astype(dtype.newbyteorder("<")).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
