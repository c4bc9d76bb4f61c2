import enum
from typing import Any, Tuple, Type, TypeVar

from usted.integers import Uint
from usted.itf.codable import Buffer

E = TypeVar("E", bound="CodableEnum")


class CodableEnum(enum.Enum):
    """
    Enum encoded as the member's declaration index (one varint byte) and
    serialized to JSON as its value.

    >>> class Scheme(CodableEnum):
    >>>     CHAR = "char"
    >>>     BPE = "bpe"
    >>>
    >>> Scheme.from_json("bpe") is Scheme.from_json("BPE") is Scheme.BPE
    True
    """

    @classmethod
    def _missing_(cls, value: Any):
        raise ValueError(f"{value!r} is not a valid {cls.__name__}; expected one of {[m.value for m in cls]}")

    def encode_size(self) -> int:
        return 1

    def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
        index = self.__class__._member_names_.index(self._name_)
        if index > 127:
            raise ValueError(f"{self.__class__.__name__} has too many members to encode in a byte")
        return Uint(index).encode_into(buffer, offset)

    def encode(self) -> bytes:
        buffer = bytearray(1)
        self.encode_into(buffer)
        return bytes(buffer)

    @classmethod
    def decode_from(cls: Type[E], buffer: Buffer, offset: int = 0) -> Tuple[E, int]:
        index, read = Uint.decode_from(buffer, offset)
        if index >= len(cls._member_names_):
            raise ValueError(f"{cls.__name__}: invalid member index {int(index)}")
        return cls._member_map_[cls._member_names_[index]], read

    @classmethod
    def decode(cls: Type[E], buffer: Buffer, offset: int = 0) -> E:
        return cls.decode_from(buffer, offset)[0]

    def to_json(self) -> Any:
        return self._value_

    @classmethod
    def from_json(cls: Type[E], data: Any) -> E:
        for member in cls:
            if member._value_ == data or member._name_ == data:
                return member
        raise ValueError(f"{data!r} is not a valid {cls.__name__}; expected one of {[m.value for m in cls]}")

    def __str__(self) -> str:
        return str(self._value_)
