"""Length-prefixed little-endian records sealed with a trailing CRC-32."""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from .errors import ChecksumError, FormatError


def pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def seal(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


class Reader:
    """Bounds-checked cursor over a sealed container body."""

    def __init__(self, blob: bytes, magic: bytes):
        if len(blob) < len(magic) + 4:
            raise FormatError(f"file too short ({len(blob)} bytes)", offset=len(blob))
        if blob[:len(magic)] != magic:
            raise FormatError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}", offset=0)
        body, tail = blob[:-4], blob[-4:]
        (stored,) = struct.unpack("<I", tail)
        if zlib.crc32(body) & 0xFFFFFFFF != stored:
            raise ChecksumError("CRC-32 mismatch, file is corrupt or truncated", offset=len(body))
        self.buf = body
        self.pos = len(magic)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"need {n} bytes, only {len(self.buf) - self.pos} left", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        start = self.pos
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("text block is not valid UTF-8", offset=start) from None

    def array(self) -> np.ndarray:
        start = self.pos
        rank = self.u32()
        if rank > 16:
            raise FormatError(f"implausible tensor rank {rank}", offset=start)
        shape = tuple(self.u64() for _ in range(rank))
        n = math.prod(shape)
        data = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        return data

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)
