"""Little-endian binary record helpers shared by the file formats."""
import struct

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError, VersionError


class Writer:
    def __init__(self):
        self.parts = []

    def magic(self, m):
        self.parts.append(m)

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def text(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def f32(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def blob(self, arr):
        """Length-prefixed (element count) float32 blob."""
        arr = np.asarray(arr)
        self.u32(arr.size)
        self.f32(arr)

    def getvalue(self):
        return b"".join(self.parts)


class Reader:
    def __init__(self, data, what="file"):
        self.data = data
        self.pos = 0
        self.what = what

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: truncated at byte {self.pos} (need {n} more, "
                f"have {len(self.data) - self.pos})")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def magic(self, expected):
        got = self._take(len(expected))
        if got != expected:
            raise BadMagicError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def text(self):
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.what}: invalid UTF-8 string") from e

    def f32(self, count):
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)

    def blob(self):
        return self.f32(self.u32())

    def version(self, supported=(1,)):
        v = self.u32()
        if v not in supported:
            raise VersionError(f"{self.what}: unsupported version {v}")
        return v

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def write_bytes(path, data):
    with open(path, "wb") as f:
        f.write(data)
