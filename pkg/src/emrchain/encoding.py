"""Deterministic length-prefixed binary encoding.

Everything that gets hashed or signed in this package serializes through
:class:`Writer` and parses back through :class:`Reader`: fixed field order,
big-endian u32 length prefixes, big-endian fixed-width integers.  There is
no alignment, no optional trailing data and no map iteration, so equal
values always produce bit-identical bytes.
"""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    """Raised when bytes do not parse as the expected canonical layout."""


_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(_U8.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(_U64.pack(value))
        return self

    def raw(self, data: bytes) -> "Writer":
        """Append bytes without a length prefix (fixed-width fields only)."""
        self._parts.append(data)
        return self

    def bytes_(self, data: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(data)))
        self._parts.append(data)
        return self

    def str_(self, text: str) -> "Writer":
        return self.bytes_(text.encode("utf-8"))

    def bool_(self, value: bool) -> "Writer":
        return self.u8(1 if value else 0)

    def opt_bytes(self, data: bytes | None) -> "Writer":
        if data is None:
            return self.u8(0)
        self.u8(1)
        return self.bytes_(data)

    def opt_str(self, text: str | None) -> "Writer":
        return self.opt_bytes(None if text is None else text.encode("utf-8"))

    def opt_bool(self, value: bool | None) -> "Writer":
        if value is None:
            return self.u8(0)
        self.u8(1)
        return self.bool_(value)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError("truncated input")
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def bytes_(self) -> bytes:
        n = self.u32()
        if n > len(self._data) - self._pos:
            raise DecodeError("length prefix exceeds input")
        return self._take(n)

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def bool_(self) -> bool:
        flag = self.u8()
        if flag not in (0, 1):
            raise DecodeError("invalid bool byte")
        return flag == 1

    def opt_bytes(self) -> bytes | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError("invalid option byte")
        return self.bytes_()

    def opt_str(self) -> str | None:
        data = self.opt_bytes()
        if data is None:
            return None
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def opt_bool(self) -> bool | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError("invalid option byte")
        return self.bool_()

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError("trailing bytes after value")
