"""Minimal NIfTI-1 reader (and fixture writer) over stdlib struct.

Scope: uncompressed single-file volumes ("n+1" magic), scalar datatypes
uint8 / int16 / float32 / float64, either byte order. Data decodes to
float64 with the header's slope/intercept scaling applied, voxel order
x-fastest exactly as stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["NiftiError", "Volume", "read_nifti1", "write_nifti1"]

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes supported here.
_DTYPES = {
    2: ("uint8", np.uint8, 8),
    4: ("int16", np.int16, 16),
    16: ("float32", np.float32, 32),
    64: ("float64", np.float64, 64),
}
_CODES = {name: (code, np_t, bits) for code, (name, np_t, bits) in _DTYPES.items()}


class NiftiError(Exception):
    """Malformed or unsupported NIfTI-1 input."""


@dataclass
class Volume:
    """Decoded scalar grid: float64 values with per-axis spacing in mm."""

    dims: tuple
    spacing: tuple
    data: np.ndarray  # shape == dims, x varying fastest in memory order
    datatype: str

    def __post_init__(self):
        if int(np.prod(self.dims)) != self.data.size:
            raise ValueError(
                f"dims {self.dims} do not match data size {self.data.size}"
            )
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


def _u(fmt, buf, offset):
    return struct.unpack_from(fmt, buf, offset)


def read_nifti1(raw: bytes) -> Volume:
    """Decode an uncompressed single-file NIfTI-1 byte string."""
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError(
            "input is gzip-compressed; decompress to a plain .nii first"
        )
    if len(raw) < HEADER_SIZE:
        raise NiftiError(
            f"header truncated: need {HEADER_SIZE} bytes, got {len(raw)}"
        )

    # The dim[0] field (number of dimensions) is 1..7 in a well-formed file;
    # reading it under the wrong byte order yields a value outside that range.
    bo = "<"
    (nd,) = _u("<h", raw, 40)
    if not 1 <= nd <= 7:
        bo = ">"
        (nd,) = _u(">h", raw, 40)
        if not 1 <= nd <= 7:
            raise NiftiError(
                f"cannot determine byte order: dim[0] invalid under both "
                f"(little-endian read: {_u('<h', raw, 40)[0]})"
            )

    magic = raw[344:348]
    if magic != MAGIC:
        raise NiftiError(
            f"bad magic {magic!r}: only single-file NIfTI-1 ({MAGIC!r}) is supported"
        )

    dim = _u(bo + "8h", raw, 40)
    if not 2 <= nd <= 4:
        raise NiftiError(f"unsupported dimensionality {nd} (need 2..4)")
    dims = tuple(int(d) for d in dim[1:nd + 1])
    if any(d < 1 for d in dims):
        raise NiftiError(f"non-positive extent in dims {dims}")

    (datatype_code,) = _u(bo + "h", raw, 70)
    if datatype_code not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype_code}")
    name, np_type, _bits = _DTYPES[datatype_code]

    pixdim = _u(bo + "8f", raw, 76)
    # Non-positive spacing entries carry no information; fall back to 1 mm.
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:nd + 1])

    (vox_offset,) = _u(bo + "f", raw, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        offset = HEADER_SIZE + 4  # default single-file data start
    (slope,) = _u(bo + "f", raw, 112)
    (inter,) = _u(bo + "f", raw, 116)

    count = int(np.prod(dims))
    expected = count * np.dtype(np_type).itemsize
    actual = len(raw) - offset
    if actual < expected:
        raise NiftiError(
            f"payload truncated: expected {expected} data bytes, got {actual}"
        )

    values = np.frombuffer(
        raw, dtype=np.dtype(np_type).newbyteorder(bo), count=count, offset=offset
    ).astype(np.float64)
    if slope != 0.0:
        values = values * float(slope) + float(inter)
    data = values.reshape(dims, order="F")
    return Volume(dims=dims, spacing=spacing, data=data, datatype=name)


def write_nifti1(data, spacing=None, datatype="float32", byteorder="<",
                 slope=0.0, inter=0.0) -> bytes:
    """Encode an array as single-file NIfTI-1 bytes (testing/fixture writer).

    ``data`` is stored as-is in the requested datatype; slope/inter are
    written to the header but NOT un-applied to the values, so a round trip
    with slope not in {0, 1} scales the data (that is the point of the
    fixture).
    """
    arr = np.asarray(data)
    nd = arr.ndim
    if not 2 <= nd <= 4:
        raise ValueError(f"need 2..4 dimensions, got {nd}")
    if datatype not in _CODES:
        raise ValueError(f"unsupported datatype {datatype!r}")
    if byteorder not in ("<", ">"):
        raise ValueError("byteorder must be '<' or '>'")
    code, np_type, bits = _CODES[datatype]
    if spacing is None:
        spacing = (1.0,) * nd
    if len(spacing) != nd:
        raise ValueError(f"spacing needs {nd} entries, got {len(spacing)}")

    header = bytearray(HEADER_SIZE)
    struct.pack_into(byteorder + "i", header, 0, HEADER_SIZE)
    dim = [nd] + [int(d) for d in arr.shape] + [1] * (7 - nd)
    struct.pack_into(byteorder + "8h", header, 40, *dim)
    struct.pack_into(byteorder + "h", header, 70, code)
    struct.pack_into(byteorder + "h", header, 72, bits)
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0] * (7 - nd)
    struct.pack_into(byteorder + "8f", header, 76, *pixdim)
    struct.pack_into(byteorder + "f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into(byteorder + "f", header, 112, float(slope))
    struct.pack_into(byteorder + "f", header, 116, float(inter))
    header[344:348] = MAGIC

    payload = np.asfortranarray(arr.astype(np_type)) \
        .astype(np.dtype(np_type).newbyteorder(byteorder), copy=False) \
        .tobytes(order="F")
    return bytes(header) + b"\x00" * 4 + payload
