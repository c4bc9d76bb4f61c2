from typing import Tuple

from usted.integers import Uint
from usted.itf.codable import Buffer, Codable


class String(str, Codable):
    """
    UTF-8 string with a varint byte-length prefix.

    Examples:
        >>> String("mlm").encode()
        b'\\x03mlm'
    """

    def encode_size(self) -> int:
        raw = str(self).encode("utf-8")
        return Uint(len(raw)).encode_size() + len(raw)

    def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
        raw = str(self).encode("utf-8")
        self._check_buffer_size(buffer, Uint(len(raw)).encode_size() + len(raw), offset)
        current = offset + Uint(len(raw)).encode_into(buffer, offset)
        buffer[current:current + len(raw)] = raw
        return current + len(raw) - offset

    @classmethod
    def decode_from(cls, buffer: Buffer, offset: int = 0) -> Tuple["String", int]:
        from usted.constants import MAX_STRING_BYTES

        byte_len, prefix = Uint.decode_from(buffer, offset)
        if byte_len > MAX_STRING_BYTES:
            raise ValueError(f"String byte length {byte_len} exceeds maximum {MAX_STRING_BYTES}")

        start = offset + prefix
        if len(buffer) - start < byte_len:
            raise ValueError(
                f"Insufficient buffer: expected {byte_len} UTF-8 bytes at offset {start}, "
                f"have {len(buffer) - start} bytes"
            )
        try:
            text = bytes(buffer[start:start + byte_len]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ValueError(f"Invalid UTF-8 data at offset {start}: {e}") from e
        return cls(text), prefix + byte_len

    def to_json(self) -> str:
        return str(self)

    @classmethod
    def from_json(cls, data: str) -> "String":
        if not isinstance(data, str):
            raise TypeError(f"expected a JSON string, got {type(data).__name__}")
        return cls(data)
