from abc import ABC, abstractmethod
from typing import Generic, Tuple, TypeVar, Union

T = TypeVar("T")

Buffer = Union[bytes, bytearray, memoryview]


class Codable(ABC, Generic[T]):
    """Interface shared by every on-disk record: checkpoints, feature files, config headers."""

    @abstractmethod
    def encode_size(self) -> int:
        """
        Number of bytes `encode_into` will write.

        Returns:
            The encoded size in bytes.
        """
        raise NotImplementedError("Subclasses must implement this method")

    @abstractmethod
    def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
        """
        Write the value into `buffer` starting at `offset`.

        Args:
            buffer: Destination buffer, at least `offset + encode_size()` long.
            offset: Position of the first byte.

        Returns:
            The number of bytes written.
        """
        raise NotImplementedError("Subclasses must implement this method")

    def encode(self) -> bytes:
        buffer = bytearray(self.encode_size())
        written = self.encode_into(buffer)
        return bytes(buffer[:written])

    @classmethod
    def decode_from(cls, buffer: Buffer, offset: int = 0) -> Tuple[T, int]:
        """
        Read a value from `buffer` starting at `offset`.

        Returns:
            A tuple of the decoded value and the number of bytes consumed.
        """
        raise NotImplementedError("Subclasses must implement this method")

    @classmethod
    def decode(cls, buffer: Buffer, offset: int = 0) -> T:
        value, _ = cls.decode_from(buffer, offset)
        return value

    @classmethod
    def _check_buffer_size(cls, buffer: Buffer, size: int, offset: int) -> None:
        if len(buffer) - offset < size:
            raise ValueError(
                f"{cls.__name__}: buffer too small, need {size} bytes at offset {offset}, "
                f"have {len(buffer) - offset}"
            )
