"""Big-endian binary helpers shared by the envelope and trap codecs."""

from __future__ import annotations

import struct
from ipaddress import IPv4Address

from appnet.errors import DecodeError


class Writer:
    def __init__(self) -> None:
        self._buf = bytearray()

    def u8(self, v: int) -> "Writer":
        self._buf += struct.pack(">B", v)
        return self

    def u16(self, v: int) -> "Writer":
        self._buf += struct.pack(">H", v)
        return self

    def u32(self, v: int) -> "Writer":
        self._buf += struct.pack(">I", v)
        return self

    def u64(self, v: int) -> "Writer":
        self._buf += struct.pack(">Q", v)
        return self

    def raw(self, data: bytes) -> "Writer":
        self._buf += data
        return self

    def ip4(self, addr: IPv4Address) -> "Writer":
        self._buf += addr.packed
        return self

    def lp16(self, data: bytes) -> "Writer":
        """A u16 length prefix followed by the bytes."""
        if len(data) > 0xFFFF:
            raise ValueError(f"lp16 block too large: {len(data)}")
        self.u16(len(data))
        self._buf += data
        return self

    def section(self, items: list[bytes]) -> "Writer":
        """A u32 byte-length section of lp16-prefixed entries."""
        body = bytearray()
        for item in items:
            if len(item) > 0xFFFF:
                raise ValueError(f"section entry too large: {len(item)}")
            body += struct.pack(">H", len(item))
            body += item
        self.u32(len(body))
        self._buf += body
        return self

    def getvalue(self) -> bytes:
        return bytes(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError(
                f"truncated frame: wanted {n} bytes at offset {self._pos}, "
                f"have {len(self._data) - self._pos}"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def ip4(self) -> IPv4Address:
        return IPv4Address(self._take(4))

    def lp16(self) -> bytes:
        return self._take(self.u16())

    def section(self) -> list[bytes]:
        length = self.u32()
        end = self._pos + length
        if end > len(self._data):
            raise DecodeError(f"truncated section: {length} bytes claimed")
        items: list[bytes] = []
        while self._pos < end:
            items.append(self.lp16())
        if self._pos != end:
            raise DecodeError("section entries overran the section length")
        return items

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos
