"""Binary container shared by checkpoint and dataset files.

Layout (all little-endian)::

    b"RTTA" | u32 version | u8 block type | block payload

Payload primitives are length-prefixed strings, u32 extents and raw f64/i64
arrays, so files round-trip bit-exactly.
"""
import io
import os
import struct
import tempfile

import numpy as np

MAGIC = b"RTTA"
VERSION = 1
BLOCK_CHECKPOINT = 1
BLOCK_DATASET = 2


class FormatError(ValueError):
    pass


class Writer:
    def __init__(self, block):
        self.buf = io.BytesIO()
        self.buf.write(MAGIC)
        self.u32(VERSION)
        self.u8(block)

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def i64(self, v):
        self.buf.write(struct.pack("<q", v))

    def f64(self, v):
        self.buf.write(struct.pack("<d", v))

    def string(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.buf.write(raw)

    def dims(self, shape):
        self.u32(len(shape))
        for d in shape:
            self.u32(d)

    def f64_array(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def i64_array(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def getvalue(self):
        return self.buf.getvalue()


class Reader:
    def __init__(self, data, block):
        self.view = memoryview(data)
        self.pos = 0
        if bytes(self._take(4)) != MAGIC:
            raise FormatError("bad magic; not an RTTA file")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        got = self.u8()
        if got != block:
            raise FormatError(f"expected block type {block}, found {got}")

    def _take(self, n):
        if self.pos + n > len(self.view):
            raise FormatError("truncated file")
        out = self.view[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def string(self):
        return bytes(self._take(self.u32())).decode("utf-8")

    def dims(self):
        return tuple(self.u32() for _ in range(self.u32()))

    def f64_array(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def i64_array(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self._take(8 * n), dtype="<i8").astype(np.int64).reshape(shape)

    def done(self):
        if self.pos != len(self.view):
            raise FormatError(f"{len(self.view) - self.pos} trailing bytes")


def atomic_write(path, data):
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
