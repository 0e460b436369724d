"""Binary dense-matrix container.

Layout (little endian): magic ``b"NFRM"``, u32 version (1), u32 rows,
u32 cols, then ``rows * cols`` float32 values in row-major order. Several
records may be concatenated in one file.
"""

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"NFRM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def pack(matrix):
    a = np.ascontiguousarray(np.atleast_2d(matrix), dtype="<f4")
    n, d = a.shape
    return _HEADER.pack(MAGIC, VERSION, n, d) + a.tobytes()


def unpack(buf, offset=0):
    """Decode one record starting at ``offset``; returns (matrix, next_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise ParseError("truncated NFRM header")
    magic, version, n, d = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ParseError(f"unsupported NFRM version {version}")
    start = offset + _HEADER.size
    end = start + 4 * n * d
    if len(buf) < end:
        raise ParseError(f"NFRM payload truncated: need {end - start} bytes, have {len(buf) - start}")
    a = np.frombuffer(buf, dtype="<f4", count=n * d, offset=start).reshape(n, d)
    return a.astype(np.float32), end


def read_all(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    out, pos = [], 0
    while pos < len(buf):
        a, pos = unpack(buf, pos)
        out.append(a)
    if not out:
        raise ParseError(f"{path}: empty file")
    return out


def write_all(path, matrices):
    with open(path, "wb") as fh:
        for m in matrices:
            fh.write(pack(m))
