import dataclasses
import struct as _struct
import types
import typing
from dataclasses import MISSING, dataclass, fields
import sys
from typing import Any, Callable, Dict, Tuple, Union

if sys.version_info >= (3, 11):
    from typing import dataclass_transform
else:
    from typing_extensions import dataclass_transform

from usted.integers import Uint, unzigzag, zigzag
from usted.itf.codable import Buffer, Codable
from usted.string import String

_F64 = _struct.Struct("<d")


def _need(buffer: Buffer, size: int, offset: int) -> None:
    if len(buffer) - offset < size:
        raise ValueError(f"Buffer too small: need {size} bytes at offset {offset}, have {len(buffer) - offset}")


class FieldCodec:
    """Binary + JSON codec for one field annotation."""

    def __init__(self, size: Callable, write: Callable, read: Callable, to_json: Callable, from_json: Callable):
        self.size = size
        self.write = write
        self.read = read
        self.to_json = to_json
        self.from_json = from_json


def _int_codec() -> FieldCodec:
    def from_json(data):
        if isinstance(data, bool) or not isinstance(data, (int, float)) or int(data) != data:
            raise TypeError(f"expected an integer, got {data!r}")
        return int(data)

    def read(buf, off):
        raw, read_ = Uint.decode_from(buf, off)
        return unzigzag(int(raw)), read_

    return FieldCodec(
        size=lambda v: Uint(zigzag(v)).encode_size(),
        write=lambda v, buf, off: Uint(zigzag(v)).encode_into(buf, off),
        read=read,
        to_json=int,
        from_json=from_json,
    )


def _float_codec() -> FieldCodec:
    def write(v, buf, off):
        _need(buf, 8, off)
        _F64.pack_into(buf, off, float(v))
        return 8

    def read(buf, off):
        _need(buf, 8, off)
        return _F64.unpack_from(buf, off)[0], 8

    def from_json(data):
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise TypeError(f"expected a number, got {data!r}")
        return float(data)

    return FieldCodec(lambda v: 8, write, read, float, from_json)


def _bool_codec() -> FieldCodec:
    def write(v, buf, off):
        _need(buf, 1, off)
        buf[off] = int(bool(v))
        return 1

    def read(buf, off):
        _need(buf, 1, off)
        return bool(buf[off]), 1

    def from_json(data):
        if not isinstance(data, bool):
            raise TypeError(f"expected true/false, got {data!r}")
        return data

    return FieldCodec(lambda v: 1, write, read, bool, from_json)


def _str_codec() -> FieldCodec:
    def read(buf, off):
        text, read_ = String.decode_from(buf, off)
        return str(text), read_

    return FieldCodec(
        size=lambda v: String(v).encode_size(),
        write=lambda v, buf, off: String(v).encode_into(buf, off),
        read=read,
        to_json=str,
        from_json=lambda data: str(String.from_json(data)),
    )


def _codable_codec(tp: type) -> FieldCodec:
    return FieldCodec(
        size=lambda v: v.encode_size(),
        write=lambda v, buf, off: v.encode_into(buf, off),
        read=lambda buf, off: tp.decode_from(buf, off),
        to_json=lambda v: v.to_json(),
        from_json=tp.from_json,
    )


def _list_codec(inner: FieldCodec) -> FieldCodec:
    def size(v):
        return Uint(len(v)).encode_size() + sum(inner.size(x) for x in v)

    def write(v, buf, off):
        current = off + Uint(len(v)).encode_into(buf, off)
        for item in v:
            current += inner.write(item, buf, current)
        return current - off

    def read(buf, off):
        from usted.constants import MAX_SEQUENCE_LENGTH

        count, current = Uint.decode_from(buf, off)
        if count > MAX_SEQUENCE_LENGTH:
            raise ValueError(f"Sequence length {int(count)} exceeds maximum {MAX_SEQUENCE_LENGTH}")
        current += off
        items = []
        for _ in range(count):
            item, read_ = inner.read(buf, current)
            items.append(item)
            current += read_
        return items, current - off

    def from_json(data):
        if not isinstance(data, list):
            raise TypeError(f"expected a JSON list, got {type(data).__name__}")
        return [inner.from_json(x) for x in data]

    return FieldCodec(size, write, read, lambda v: [inner.to_json(x) for x in v], from_json)


def _dict_codec(inner: FieldCodec) -> FieldCodec:
    keys = _str_codec()

    def size(v):
        return Uint(len(v)).encode_size() + sum(keys.size(k) + inner.size(x) for k, x in v.items())

    def write(v, buf, off):
        current = off + Uint(len(v)).encode_into(buf, off)
        for k in sorted(v):
            current += keys.write(k, buf, current)
            current += inner.write(v[k], buf, current)
        return current - off

    def read(buf, off):
        from usted.constants import MAX_SEQUENCE_LENGTH

        count, current = Uint.decode_from(buf, off)
        if count > MAX_SEQUENCE_LENGTH:
            raise ValueError(f"Dictionary size {int(count)} exceeds maximum {MAX_SEQUENCE_LENGTH}")
        current += off
        result, previous = {}, None
        for _ in range(count):
            k, read_ = keys.read(buf, current)
            current += read_
            if previous is not None and k <= previous:
                raise ValueError("Dictionary keys must be in strictly ascending order")
            previous = k
            result[k], read_ = inner.read(buf, current)
            current += read_
        return result, current - off

    def from_json(data):
        if not isinstance(data, dict):
            raise TypeError(f"expected a JSON object, got {type(data).__name__}")
        return {str(k): inner.from_json(x) for k, x in data.items()}

    return FieldCodec(size, write, read, lambda v: {k: inner.to_json(v[k]) for k in sorted(v)}, from_json)


def _optional_codec(inner: FieldCodec) -> FieldCodec:
    def write(v, buf, off):
        if v is None:
            buf[off] = 0
            return 1
        buf[off] = 1
        return 1 + inner.write(v, buf, off + 1)

    def read(buf, off):
        _need(buf, 1, off)
        if buf[off] == 0:
            return None, 1
        value, read_ = inner.read(buf, off + 1)
        return value, 1 + read_

    return FieldCodec(
        size=lambda v: 1 if v is None else 1 + inner.size(v),
        write=write,
        read=read,
        to_json=lambda v: None if v is None else inner.to_json(v),
        from_json=lambda data: None if data is None else inner.from_json(data),
    )


def codec_for(annotation: Any, depth: int = 0) -> FieldCodec:
    """Resolve a field annotation to its codec."""
    from usted.constants import MAX_NESTING_DEPTH

    if depth > MAX_NESTING_DEPTH:
        raise TypeError(f"Annotation nesting exceeds maximum depth {MAX_NESTING_DEPTH}")

    origin = typing.get_origin(annotation)
    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) != 1:
            raise TypeError(f"Only Optional[T] unions are supported, got {annotation!r}")
        return _optional_codec(codec_for(args[0], depth + 1))
    if origin is list:
        (inner,) = typing.get_args(annotation)
        return _list_codec(codec_for(inner, depth + 1))
    if origin is dict:
        key, inner = typing.get_args(annotation)
        if key is not str:
            raise TypeError(f"Dictionary keys must be str, got {key!r}")
        return _dict_codec(codec_for(inner, depth + 1))

    if annotation is bool:
        return _bool_codec()
    if annotation is int:
        return _int_codec()
    if annotation is float:
        return _float_codec()
    if annotation is str:
        return _str_codec()
    if isinstance(annotation, type) and hasattr(annotation, "decode_from") and hasattr(annotation, "from_json"):
        return _codable_codec(annotation)
    raise TypeError(f"No codec for field annotation {annotation!r}")


@dataclass_transform()
def structure(_cls=None, *, frozen=False, **kwargs):
    """Dataclass with binary serialization and strict JSON round trip.

    Usage:
        >>> @structure
        >>> class CorruptionConfig:
        >>>     mask_rate: float = 0.4
        >>>     seed: int = field(default=0, metadata={"name": "rng_seed"})

    `from_json` fills missing keys from the dataclass defaults and rejects
    keys the class does not declare.
    """
    def wrap(cls):
        new_cls = dataclass(cls, frozen=frozen, **kwargs)
        codecs: Dict[str, FieldCodec] = {}

        def _codecs() -> Dict[str, FieldCodec]:
            # resolved lazily so a structure may reference classes defined after it
            if not codecs:
                hints = typing.get_type_hints(new_cls)
                for f in fields(new_cls):
                    codecs[f.name] = codec_for(hints[f.name])
            return codecs

        def json_key(f) -> str:
            return f.metadata.get("name", f.name)

        def encode_size(self) -> int:
            return sum(c.size(getattr(self, name)) for name, c in _codecs().items())

        def encode_into(self, buffer: bytearray, offset: int = 0) -> int:
            current = offset
            for name, c in _codecs().items():
                current += c.write(getattr(self, name), buffer, current)
            return current - offset

        def encode(self) -> bytes:
            buffer = bytearray(self.encode_size())
            written = self.encode_into(buffer)
            return bytes(buffer[:written])

        @classmethod
        def decode_from(klass, buffer: Buffer, offset: int = 0) -> Tuple[Any, int]:
            current = offset
            values = {}
            for name, c in _codecs().items():
                values[name], read = c.read(buffer, current)
                current += read
            return klass(**values), current - offset

        @classmethod
        def decode(klass, buffer: Buffer, offset: int = 0) -> Any:
            return klass.decode_from(buffer, offset)[0]

        def to_json(self) -> dict:
            return {json_key(f): _codecs()[f.name].to_json(getattr(self, f.name)) for f in fields(self)}

        @classmethod
        def from_json(klass, data: dict) -> Any:
            if not isinstance(data, dict):
                raise TypeError(f"{klass.__name__}: expected a JSON object, got {type(data).__name__}")
            known = {json_key(f): f for f in fields(klass)}
            unknown = sorted(set(data) - set(known))
            if unknown:
                raise ValueError(f"{klass.__name__}: unknown field(s) {unknown}")
            init = {}
            for key, f in known.items():
                if key in data:
                    try:
                        init[f.name] = _codecs()[f.name].from_json(data[key])
                    except TypeError as e:
                        raise TypeError(f"{klass.__name__}.{key}: {e}") from e
                    except ValueError as e:
                        raise ValueError(f"{klass.__name__}.{key}: {e}") from e
                elif f.default is MISSING and f.default_factory is MISSING:
                    raise ValueError(f"{klass.__name__}: missing required field {key!r}")
            return klass(**init)

        def replace(self, **changes) -> Any:
            return dataclasses.replace(self, **changes)

        for name, fn in {
            "encode_size": encode_size,
            "encode_into": encode_into,
            "encode": encode,
            "decode_from": decode_from,
            "decode": decode,
            "to_json": to_json,
            "from_json": from_json,
            "replace": replace,
        }.items():
            # Only overwrite if the class does not define it
            if name not in new_cls.__dict__:
                setattr(new_cls, name, fn)

        Codable.register(new_cls)
        return new_cls

    return wrap if _cls is None else wrap(_cls)
