import abc
import struct
from typing import Any, Optional, Tuple

from usted.itf.codable import Buffer, Codable


class UintCheckMeta(abc.ABCMeta):
    """`isinstance` matches only integers of the same width"""
    def __instancecheck__(cls, instance):
        return isinstance(instance, int) and getattr(instance, "byte_size", 0) == cls.byte_size


class Uint(int, Codable, metaclass=UintCheckMeta):
    """
    Unsigned integer codec.

    `Uint` without a width is the general varint used for counts and lengths
    (up to 2**64 - 1); `Uint[8]` and `Uint[32]` are fixed-width little-endian.

    Usage:
        >>> Uint(300).encode()
        b'\\x81,'
        >>> U32(7).encode()
        b'\\x07\\x00\\x00\\x00'
    """

    byte_size: int = 0
    _bound = 1 << 64

    _structs = {
        1: struct.Struct("<B"),
        4: struct.Struct("<I"),
    }

    @classmethod
    def __class_getitem__(cls, bits: Optional[int]):
        if not bits:
            return Uint
        if bits % 8 or bits // 8 not in cls._structs:
            raise TypeError(f"Uint width must be 8 or 32 bits, got {bits}")
        return type(f"U{bits}", (cls,), {"byte_size": bits // 8, "_bound": 1 << bits})

    def __new__(cls, value: Any):
        value = int(value)
        if not 0 <= value < cls._bound:
            raise ValueError(f"{cls.__name__} out of range: {value!r} not in [0, {cls._bound - 1}]")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"{self.__class__.__name__}({int(self)})"

    def to_json(self) -> int:
        return int(self)

    @classmethod
    def from_json(cls, data: Any) -> "Uint":
        return cls(int(data))

    # ---------------------------------------------------------------------------- #
    #                                 Serialization                                #
    # ---------------------------------------------------------------------------- #
    def encode_size(self) -> int:
        if self.byte_size:
            return self.byte_size
        value = int(self)
        if value < 128:
            return 1
        if value < 1 << 56:
            return 1 + (value.bit_length() - 1) // 7
        return 9

    def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
        if self.byte_size:
            self._check_buffer_size(buffer, self.byte_size, offset)
            self._structs[self.byte_size].pack_into(buffer, offset, int(self))
            return self.byte_size

        value = int(self)
        size = self.encode_size()
        self._check_buffer_size(buffer, size, offset)
        if size == 1:
            buffer[offset] = value
        elif size == 9:
            buffer[offset] = 0xFF
            buffer[offset + 1:offset + 9] = value.to_bytes(8, "little")
        else:
            # prefix carries the payload length in its leading ones and the high bits of value
            extra = size - 1
            buffer[offset] = (256 - (1 << (8 - extra))) + (value >> (extra * 8))
            buffer[offset + 1:offset + size] = (value & ((1 << (extra * 8)) - 1)).to_bytes(extra, "little")
        return size

    @classmethod
    def decode_from(cls, buffer: Buffer, offset: int = 0) -> Tuple["Uint", int]:
        if cls.byte_size:
            cls._check_buffer_size(buffer, cls.byte_size, offset)
            return cls(cls._structs[cls.byte_size].unpack_from(buffer, offset)[0]), cls.byte_size

        cls._check_buffer_size(buffer, 1, offset)
        tag = buffer[offset]
        if tag < 128:
            return cls(tag), 1
        if tag == 0xFF:
            cls._check_buffer_size(buffer, 9, offset)
            return cls(int.from_bytes(buffer[offset + 1:offset + 9], "little")), 9

        extra = 8 - (256 - tag).bit_length()
        if (256 - tag) & (255 - tag) == 0:
            extra += 1
        cls._check_buffer_size(buffer, extra + 1, offset)
        high = tag + (1 << (8 - extra)) - 256
        low = int.from_bytes(buffer[offset + 1:offset + 1 + extra], "little")
        return cls((high << (extra * 8)) + low), extra + 1


U8 = Uint[8]
U32 = Uint[32]


def zigzag(value: int) -> int:
    """Map a signed integer onto the varint domain: 0, -1, 1, -2 -> 0, 1, 2, 3."""
    return value * 2 if value >= 0 else -value * 2 - 1


def unzigzag(value: int) -> int:
    return value // 2 if value % 2 == 0 else -(value + 1) // 2
