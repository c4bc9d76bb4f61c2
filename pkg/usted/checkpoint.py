"""
Checkpoint container.

Layout (little-endian):

    header   CheckpointHeader (magic, version, config digest, step, seed)
    config   ModelConfig in its binary form
    meta     String holding JSON {"rng": ..., "metadata": ...}
    opt      varint Adam step count
    count    varint number of tensor records
    records  count x (varint byte length, TensorRecord)

Parameters are stored under their canonical names, Adam moments under
`adam.m.<name>` and `adam.v.<name>`.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from usted.arrays import Float64Array
from usted.constants import MAX_RECORDS
from usted.integers import U8, U32, Uint
from usted.model import Model, ModelConfig
from usted.numerics import Tensor
from usted.optim import Adam
from usted.string import String
from usted.struct import structure

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 0x4B435355  # b"USCK" little-endian
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, inconsistent or incompatible checkpoint."""


@structure
class CheckpointHeader:
    magic: U32
    version: U8
    config_digest: str
    step: int
    seed: int


@structure
class TensorRecord:
    name: str
    value: Float64Array


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(
        cls,
        model: Model,
        step: int = 0,
        seed: int = 0,
        optimizer: Optional[Adam] = None,
        rng: Optional[np.random.Generator] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> "Checkpoint":
        return cls(
            config=model.config,
            params=model.state_dict(),
            step=step,
            seed=seed,
            optimizer=optimizer.state_dict() if optimizer is not None else {},
            optimizer_step=optimizer.step_count if optimizer is not None else 0,
            rng_state=rng.bit_generator.state if rng is not None else None,
            metadata=dict(metadata or {}),
        )

    def model(self) -> Model:
        return Model(self.config, {n: Tensor.parameter(a, name=n) for n, a in self.params.items()})

    def restore_optimizer(self, optimizer: Adam) -> None:
        if self.optimizer:
            optimizer.load_state_dict(self.optimizer, self.optimizer_step)

    def restore_rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    # ---------------------------------------------------------------------------- #
    #                                 Serialization                                #
    # ---------------------------------------------------------------------------- #
    def encode(self) -> bytes:
        header = CheckpointHeader(
            U32(CHECKPOINT_MAGIC), U8(CHECKPOINT_VERSION), self.config.digest(), self.step, self.seed
        )
        meta = String(json.dumps({"rng": self.rng_state, "metadata": self.metadata}, sort_keys=True))
        records = [TensorRecord(n, Float64Array(a)) for n, a in self.params.items()]
        records += [TensorRecord(n, Float64Array(a)) for n, a in self.optimizer.items()]

        out = bytearray(header.encode())
        out += self.config.encode()
        out += meta.encode()
        out += Uint(self.optimizer_step).encode()
        out += Uint(len(records)).encode()
        for record in records:
            body = record.encode()
            out += Uint(len(body)).encode()
            out += body
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes) -> "Checkpoint":
        try:
            header, offset = CheckpointHeader.decode_from(data)
            if header.magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad checkpoint magic {int(header.magic):#010x}")
            if header.version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {int(header.version)}")
            config, read = ModelConfig.decode_from(data, offset)
            offset += read
            if config.digest() != header.config_digest:
                raise CheckpointError("config digest in header does not match the stored config")
            meta, read = String.decode_from(data, offset)
            offset += read
            optimizer_step, read = Uint.decode_from(data, offset)
            offset += read
            count, read = Uint.decode_from(data, offset)
            offset += read
            if count > MAX_RECORDS:
                raise CheckpointError(f"{int(count)} tensor records exceed maximum {MAX_RECORDS}")

            params: Dict[str, np.ndarray] = {}
            optimizer: Dict[str, np.ndarray] = {}
            for _ in range(count):
                size, read = Uint.decode_from(data, offset)
                offset += read
                record, read = TensorRecord.decode_from(data, offset)
                if read != size:
                    raise CheckpointError(f"tensor record {record.name!r} declares {int(size)} bytes, holds {read}")
                offset += read
                target = optimizer if record.name.startswith("adam.") else params
                if record.name in target:
                    raise CheckpointError(f"duplicate tensor record {record.name!r}")
                target[record.name] = record.value.array
        except CheckpointError:
            raise
        except ValueError as e:
            raise CheckpointError(f"corrupt checkpoint: {e}") from e
        if offset != len(data):
            raise CheckpointError(f"{len(data) - offset} trailing bytes after the last tensor record")

        extra = json.loads(str(meta))
        return cls(
            config=config,
            params=params,
            step=header.step,
            seed=header.seed,
            optimizer=optimizer,
            optimizer_step=int(optimizer_step),
            rng_state=extra.get("rng"),
            metadata=extra.get("metadata", {}),
        )


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint.encode())
    os.replace(tmp, path)
    logger.info("wrote checkpoint %s (step %d, %d tensors)", path, checkpoint.step, len(checkpoint.params))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint.decode(data)
