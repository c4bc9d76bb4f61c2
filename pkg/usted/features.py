"""
Speech feature pipeline: frame sequences, frame stacking with downsampling,
synthetic rendering of character strings, and the binary feature file.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np

from usted.arrays import Float32Array
from usted.constants import BASE_FEATURE_DIM, STACK_FRAMES, STACK_STRIDE
from usted.integers import U32
from usted.struct import structure

logger = logging.getLogger(__name__)

FEATURE_MAGIC = 0x46545355  # b"USTF" little-endian

# Fixed generator streams for the synthetic speech model
_PROTOTYPE_STREAM = 0x5EED_F0
_DURATION_STREAM = 0x5EED_D0
MIN_DURATION = 2
MAX_DURATION = 4


class DataError(ValueError):
    """Malformed corpus, feature file, manifest or task registry."""


@dataclass(frozen=True)
class FrameSequence:
    """
    N x D matrix of per-frame feature vectors.

    `frames` is stored as a read-only float64 copy; `period` is the frame
    shift in time units (grows by the stride when downsampled).
    """

    frames: np.ndarray
    period: float = 1.0

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim != 2:
            raise DataError(f"frames must be an N x D matrix, got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise DataError("a frame sequence needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise DataError("frame values must be finite")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, FrameSequence) and self.period == other.period \
            and np.array_equal(self.frames, other.frames)

    __hash__ = None


def stack_downsample(seq: FrameSequence, stack: int = STACK_FRAMES, stride: int = STACK_STRIDE) -> FrameSequence:
    """
    Concatenate each kept frame with its `stack - 1` left neighbours.

    Kept source indices are 0, stride, 2*stride, ...; neighbours before the
    first frame repeat frame 0. Output shape is ceil(N / stride) x stack*D.
    """
    if stack < 1 or stride < 1:
        raise ValueError(f"stack and stride must be positive, got stack={stack} stride={stride}")
    kept = np.arange(0, len(seq), stride)
    window = kept[:, None] + np.arange(1 - stack, 1)[None, :]
    stacked = seq.frames[np.maximum(window, 0)]
    return FrameSequence(stacked.reshape(len(kept), stack * seq.dim), seq.period * stride)


# ---------------------------------------------------------------------------- #
#                               Synthetic speech                               #
# ---------------------------------------------------------------------------- #
@lru_cache(maxsize=None)
def _prototype(code: int, dim: int) -> np.ndarray:
    vector = np.random.default_rng([_PROTOTYPE_STREAM, code]).standard_normal(dim)
    vector.setflags(write=False)
    return vector


def char_prototype(ch: str, dim: int = BASE_FEATURE_DIM) -> np.ndarray:
    """Fixed random feature vector of one character."""
    return _prototype(ord(ch), dim)


@lru_cache(maxsize=None)
def char_duration(ch: str) -> int:
    """Fixed frame count of one character, in [2, 4]."""
    return int(np.random.default_rng([_DURATION_STREAM, ord(ch)]).integers(MIN_DURATION, MAX_DURATION + 1))


def render_speech(
    text: str,
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    dim: int = BASE_FEATURE_DIM,
) -> FrameSequence:
    """
    Render a character string as prototype repeats plus N(0, noise^2) frame noise.

    With `noise == 0` the result is a pure function of `text`.
    """
    if not text:
        raise DataError("cannot render speech for empty text")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    frames = np.concatenate([
        np.broadcast_to(char_prototype(ch, dim), (char_duration(ch), dim)) for ch in text
    ])
    if noise > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise > 0")
        frames = frames + noise * rng.standard_normal(frames.shape)
    return FrameSequence(frames)


# ---------------------------------------------------------------------------- #
#                                 Feature files                                #
# ---------------------------------------------------------------------------- #
@structure
class FeatureHeader:
    magic: U32
    frames: U32
    dim: U32


def encode_features(seq: FrameSequence) -> bytes:
    header = FeatureHeader(U32(FEATURE_MAGIC), U32(len(seq)), U32(seq.dim))
    return header.encode() + Float32Array(seq.frames).encode_payload()


def decode_features(data: bytes) -> FrameSequence:
    try:
        header, offset = FeatureHeader.decode_from(data)
    except ValueError as e:
        raise DataError(f"truncated feature header: {e}") from e
    if header.magic != FEATURE_MAGIC:
        raise DataError(f"bad feature file magic {int(header.magic):#010x}")
    shape = (int(header.frames), int(header.dim))
    try:
        expected = Float32Array.payload_size(shape)
    except ValueError as e:
        raise DataError(f"feature block too large: {e}") from e
    if len(data) - offset != expected:
        raise DataError(f"feature payload holds {len(data) - offset} bytes, header implies {expected}")
    block, _ = Float32Array.decode_payload(data, shape, offset)
    return FrameSequence(block.array)


def write_features(path: Union[str, Path], seq: FrameSequence) -> None:
    Path(path).write_bytes(encode_features(seq))


def read_features(path: Union[str, Path]) -> FrameSequence:
    return decode_features(Path(path).read_bytes())
