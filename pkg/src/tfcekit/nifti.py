"""Minimal NIfTI-1 reader/writer (single-file .nii / .nii.gz).

Covers exactly what the statistics pipeline needs: 3D volumes and 4D subject
stacks, int16/float32/float64 payloads, endian autodetection, and value
scaling.  Spatial transforms (qform/sform) are carried through as opaque
bytes; no spatial math is performed.  NIfTI-2 and .hdr/.img pairs are out of
scope.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NiftiVolume", "NiftiFormatError", "read_nifti", "write_nifti"]

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype codes accepted on read
_DTYPES = {4: np.dtype(np.int16), 16: np.dtype(np.float32), 64: np.dtype(np.float64)}

# byte span holding qform/sform/intent_name, copied through untouched
_SPATIAL_SPAN = (252, 344)


class NiftiFormatError(ValueError):
    """Malformed or unsupported NIfTI-1 content."""


@dataclass
class NiftiVolume:
    """Decoded volume: float64 data plus the header bits we preserve.

    ``data`` is 3D ``(nx, ny, nz)`` or 4D ``(nx, ny, nz, nt)``; a trailing
    dimension of 1 is kept as given.  ``spatial_bytes`` is the raw
    qform/sform region of the source header (empty for fresh volumes).
    """

    data: np.ndarray
    voxel_sizes: tuple[float, float, float] = (1.0, 1.0, 1.0)
    spatial_bytes: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"data must be 3D or 4D, got {self.data.ndim}D")

    @property
    def dims(self) -> tuple:
        return self.data.shape


def read_nifti(path) -> NiftiVolume:
    """Read a .nii or .nii.gz file.

    Gzip compression is detected from the file's leading bytes.  Endianness
    is resolved from ``sizeof_hdr``; the payload is decoded to float64 with
    ``scl_slope``/``scl_inter`` applied when ``scl_slope`` is nonzero.
    Unsupported datatypes are rejected with the offending code.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(
            f"file too short for a NIfTI-1 header ({len(raw)} < {HEADER_SIZE} bytes)"
        )
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")

    magic = raw[344:348]
    if magic != _MAGIC_SINGLE:
        raise NiftiFormatError(
            f"unsupported magic {magic!r}; only single-file 'n+1' images are handled"
        )

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if ndim not in (2, 3, 4):
        raise NiftiFormatError(f"unsupported dim[0] = {ndim}; expected 2, 3 or 4")
    shape = tuple(max(int(d), 1) for d in dim[1 : 1 + max(ndim, 3)])

    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(endian)

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)

    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {offset} overlaps the header")
    n_values = int(np.prod(shape))
    need = offset + n_values * dtype.itemsize
    if len(raw) < need:
        raise NiftiFormatError(
            f"truncated payload: need {need} bytes for dims {shape}, file has {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=n_values, offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float64)
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        data = data * np.float64(scl_slope) + np.float64(scl_inter)

    lo, hi = _SPATIAL_SPAN
    spatial = raw[lo:hi] if endian == "<" else b""  # byte-swapped qforms are dropped
    return NiftiVolume(
        data=data,
        voxel_sizes=tuple(float(abs(p)) or 1.0 for p in pixdim[1:4]),
        spatial_bytes=spatial,
    )


def write_nifti(volume: NiftiVolume, path) -> None:
    """Write float64, little-endian, scl_slope = 1 / scl_inter = 0.

    Reading the written file reproduces the payload bit-exactly.  Gzip
    output (a ``.gz`` path) is written with a zeroed modification time so
    identical volumes produce identical files.
    """
    data = volume.data
    ndim = data.ndim
    header = bytearray(352)  # 348-byte header + 4 pad, vox_offset = 352
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [ndim] + list(data.shape) + [1] * (7 - ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, 64)  # float64
    struct.pack_into("<h", header, 72, 64)  # bitpix
    pixdim = [1.0] + list(volume.voxel_sizes) + [1.0] * 4
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    if volume.spatial_bytes:
        lo, hi = _SPATIAL_SPAN
        blob = volume.spatial_bytes[: hi - lo]
        header[lo : lo + len(blob)] = blob
    header[344:348] = _MAGIC_SINGLE
    payload = np.ascontiguousarray(data, dtype="<f8").tobytes(order="F")
    raw = bytes(header) + payload
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)
