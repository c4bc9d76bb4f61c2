from typing import ClassVar, Sequence, Tuple

import numpy as np

from usted.constants import MAX_TENSOR_ELEMENTS, MAX_TENSOR_RANK
from usted.integers import Uint
from usted.itf.codable import Buffer, Codable


class NDArray(Codable):
    """
    Dense little-endian array: rank, dims (varints), then raw element bytes.

    `NDArray[np.float64]` stores parameters and optimizer moments exactly;
    `NDArray[np.float32]` stores feature blocks, whose files carry the shape
    in their own header and write only the payload.

    Usage:
        >>> block = NDArray[np.float64](np.eye(2))
        >>> NDArray[np.float64].decode(block.encode()).array
        array([[1., 0.],
               [0., 1.]])
    """

    _dtype: ClassVar[np.dtype] = np.dtype("<f8")

    def __class_getitem__(cls, dtype):
        dtype = np.dtype(dtype).newbyteorder("<")
        return type(f"NDArray[{dtype.name}]", (cls,), {"_dtype": dtype})

    def __init__(self, array):
        self.array = np.ascontiguousarray(array, dtype=self._dtype.newbyteorder("="))

    def __repr__(self):
        return f"{self.__class__.__name__}(shape={self.array.shape})"

    def __eq__(self, other):
        return isinstance(other, NDArray) and self.array.shape == other.array.shape \
            and np.array_equal(self.array, other.array)

    # ---------------------------------------------------------------------------- #
    #                                    Payload                                   #
    # ---------------------------------------------------------------------------- #
    @classmethod
    def payload_size(cls, shape: Sequence[int]) -> int:
        count = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        if count > MAX_TENSOR_ELEMENTS:
            raise ValueError(f"Array with {count} elements exceeds maximum {MAX_TENSOR_ELEMENTS}")
        return count * cls._dtype.itemsize

    def encode_payload(self) -> bytes:
        """Element bytes only; the reader must know the shape."""
        return self.array.astype(self._dtype, copy=False).tobytes()

    @classmethod
    def decode_payload(cls, buffer: Buffer, shape: Sequence[int], offset: int = 0) -> Tuple["NDArray", int]:
        shape = tuple(int(d) for d in shape)
        nbytes = cls.payload_size(shape)
        if nbytes == 0:
            return cls(np.zeros(shape, dtype=cls._dtype.newbyteorder("="))), 0
        cls._check_buffer_size(buffer, nbytes, offset)
        count = nbytes // cls._dtype.itemsize
        data = np.frombuffer(buffer, dtype=cls._dtype, count=count, offset=offset)
        return cls(data.astype(cls._dtype.newbyteorder("="), copy=True).reshape(shape)), nbytes

    # ---------------------------------------------------------------------------- #
    #                                 Serialization                                #
    # ---------------------------------------------------------------------------- #
    def encode_size(self) -> int:
        header = Uint(self.array.ndim).encode_size() + sum(Uint(d).encode_size() for d in self.array.shape)
        return header + self.array.size * self._dtype.itemsize

    def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
        self._check_buffer_size(buffer, self.encode_size(), offset)
        current = offset + Uint(self.array.ndim).encode_into(buffer, offset)
        for dim in self.array.shape:
            current += Uint(dim).encode_into(buffer, current)
        raw = self.encode_payload()
        buffer[current:current + len(raw)] = raw
        return current + len(raw) - offset

    @classmethod
    def decode_from(cls, buffer: Buffer, offset: int = 0) -> Tuple["NDArray", int]:
        rank, current = Uint.decode_from(buffer, offset)
        current += offset
        if rank > MAX_TENSOR_RANK:
            raise ValueError(f"Array rank {int(rank)} exceeds maximum {MAX_TENSOR_RANK}")
        shape = []
        for _ in range(rank):
            dim, read = Uint.decode_from(buffer, current)
            shape.append(int(dim))
            current += read
        array, read = cls.decode_payload(buffer, shape, current)
        return array, current + read - offset

    def to_json(self):
        return self.array.tolist()

    @classmethod
    def from_json(cls, data) -> "NDArray":
        return cls(np.asarray(data))


Float64Array = NDArray[np.float64]
Float32Array = NDArray[np.float32]
