"""CBNW: a little-endian binary container for named float64 arrays.

Layout, all integers little-endian:

    magic "CBNW" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 ndim | ndim * u32 dims
                | row-major float64 payload

Round trips are byte-exact: loading preserves entry order, so saving a
loaded mapping reproduces the original file bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CBNW"
VERSION = 1


class WeightFormatError(ValueError):
    """A CBNW file (or mapping destined for one) is malformed."""


def save_weights(named, path):
    """Write a name -> array mapping in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name, arr in named.items():
            raw = name.encode("utf-8")
            if not raw or len(raw) > 0xFFFF:
                raise WeightFormatError(f"bad tensor name {name!r}")
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            if arr.ndim > 255:
                raise WeightFormatError(f"tensor {name!r} has too many dims")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise WeightFormatError(f"truncated file while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt, what):
        (v,) = struct.unpack("<" + fmt, self.take(struct.calcsize(fmt), what))
        return v


def load_weights(path):
    """Read a CBNW file back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise WeightFormatError(f"{path}: not a CBNW file (bad magic)")
    version = r.u("I", "version")
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    count = r.u("I", "tensor count")
    named = {}
    for _ in range(count):
        nlen = r.u("H", "name length")
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"{path}: undecodable tensor name") from exc
        if name in named:
            raise WeightFormatError(f"{path}: duplicate tensor {name!r}")
        ndim = r.u("B", f"ndim of {name!r}")
        dims = tuple(r.u("I", f"dims of {name!r}") for _ in range(ndim))
        size = 1
        for d in dims:
            size *= d
        payload = r.take(8 * size, f"payload of {name!r}")
        named[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(blob):
        raise WeightFormatError(f"{path}: trailing data after last tensor")
    return named
