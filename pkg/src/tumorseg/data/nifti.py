"""Reader (and a small writer) for uncompressed single-file NIfTI-1 images."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
DATATYPES = {4: ("i2", 16), 16: ("f4", 32)}

# byte offsets of the fields we read
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_BITPIX = 72
OFF_VOX_OFFSET = 108
OFF_SCL_SLOPE = 112
OFF_SCL_INTER = 116
OFF_QFORM = 252
OFF_SFORM = 254
OFF_MAGIC = 344


class NiftiError(ValueError):
    pass


@dataclass
class NiftiHeader:
    endian: str
    dim: tuple
    datatype: int
    bitpix: int
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"offset 0: header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError(f"offset 0: sizeof_hdr is not {HEADER_SIZE} in either byte order")
    magic = raw[OFF_MAGIC : OFF_MAGIC + 4]
    if magic == b"ni1\x00":
        raise NiftiError(f"offset {OFF_MAGIC}: paired .hdr/.img files are not supported (magic 'ni1')")
    if magic != b"n+1\x00":
        raise NiftiError(f"offset {OFF_MAGIC}: expected magic 'n+1\\0', found {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, OFF_DIM)
    datatype, bitpix = struct.unpack_from(endian + "hh", raw, OFF_DATATYPE)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, OFF_VOX_OFFSET)
    if datatype not in DATATYPES:
        raise NiftiError(f"offset {OFF_DATATYPE}: unsupported datatype {datatype} (expected 4 or 16)")
    if bitpix != DATATYPES[datatype][1]:
        raise NiftiError(f"offset {OFF_BITPIX}: bitpix {bitpix} does not match datatype {datatype}")
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"offset {OFF_DIM}: dim[0] = {dim[0]} outside 1..7")
    qform, sform = struct.unpack_from(endian + "hh", raw, OFF_QFORM)
    if qform or sform:
        warnings.warn("NIfTI qform/sform orientation is ignored", stacklevel=3)
    return NiftiHeader(endian, dim, datatype, bitpix, vox_offset, slope, inter, magic)


def read_nifti1(path: str | Path) -> tuple[np.ndarray, NiftiHeader]:
    """Return the image as a float array in D x H x W order (z, y, x) and its header."""
    raw = Path(path).read_bytes()
    hdr = parse_header(raw)
    n = hdr.dim[0]
    extents = [d for d in hdr.dim[1 : 1 + n]]
    if any(e < 1 for e in extents):
        raise NiftiError(f"offset {OFF_DIM}: non-positive dimension in {extents}")
    count = int(np.prod(extents))
    code, bits = DATATYPES[hdr.datatype]
    start = int(hdr.vox_offset)
    need = count * bits // 8
    if start < HEADER_SIZE or len(raw) < start + need:
        raise NiftiError(
            f"offset {start}: data section needs {need} bytes, file provides {max(len(raw) - start, 0)}"
        )
    data = np.frombuffer(raw, dtype=hdr.endian + code, count=count, offset=start)
    # x varies fastest on disk, so C order is the reversed dim list
    arr = data.reshape(extents[::-1]).astype(np.float64)
    if hdr.scl_slope != 0:
        arr = arr * hdr.scl_slope + hdr.scl_inter
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    return arr.astype(np.float32), hdr


def write_nifti1(path: str | Path, array: np.ndarray, datatype: int = 16, slope: float = 0.0, inter: float = 0.0, endian: str = "<"):
    """Write ``array`` (D x H x W) as a single-file NIfTI-1 image with vox_offset 352."""
    code, bits = DATATYPES[datatype]
    arr = np.asarray(array)
    dims = arr.shape[::-1]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, OFF_DIM, len(dims), *dims, *([1] * (7 - len(dims))))
    struct.pack_into(endian + "hh", hdr, OFF_DATATYPE, datatype, bits)
    struct.pack_into(endian + "3f", hdr, OFF_VOX_OFFSET, 352.0, slope, inter)
    hdr[OFF_MAGIC : OFF_MAGIC + 4] = b"n+1\x00"
    body = arr.astype(endian + code).tobytes()
    Path(path).write_bytes(bytes(hdr) + b"\x00" * 4 + body)
