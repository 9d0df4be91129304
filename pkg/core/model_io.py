"""
NIMF binary model format.

Layout (little-endian): magic "NIMF", u16 version (1), u16 level count;
per level a u8 kind (0 affine, 1 activation); affine levels carry u32 out,
u32 in, out*in float64 weights (row-major) and out float64 biases;
activation levels carry a u8 function tag (0 relu, 1 identity). The
partition follows as u16 count and u16 boundary indices.
"""
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from core.errors import (BadMagicError, ModelFormatError, SerializationError, TruncatedModelError,
                         VersionMismatchError)
from core.network import Activation, ActivationLevel, AffineLevel, LevelPartition, ModelSpec
from utils.logger import setup_logger

logger = setup_logger(__name__)

MAGIC = b"NIMF"
FORMAT_VERSION = 1
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF

_KIND_AFFINE = 0
_KIND_ACTIVATION = 1
_ACTIVATION_TAGS = {Activation.RELU: 0, Activation.IDENTITY: 1}
_TAG_ACTIVATIONS = {tag: act for act, tag in _ACTIVATION_TAGS.items()}


def _check_field(value: int, limit: int, what: str) -> int:
    if not 0 <= value <= limit:
        raise SerializationError(f"{what} {value} does not fit the NIMF format (max {limit})")
    return value


def serialize(model: ModelSpec) -> bytes:
    """
    Encode a model, including its partition, as NIMF bytes.

    Raises:
        SerializationError: A count, dimension or boundary overflows its field
    """
    _check_field(len(model.levels), _U16_MAX, "level count")
    boundaries = model.partition.boundaries
    _check_field(len(boundaries), _U16_MAX, "partition count")
    for boundary in boundaries:
        _check_field(boundary, _U16_MAX, "partition boundary")

    chunks = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(model.levels))]
    for i, level in enumerate(model.levels):
        if isinstance(level, AffineLevel):
            _check_field(level.out_dim, _U32_MAX, f"output width of level {i}")
            _check_field(level.in_dim, _U32_MAX, f"input width of level {i}")
            chunks.append(struct.pack("<BII", _KIND_AFFINE, level.out_dim, level.in_dim))
            chunks.append(level.weight.astype("<f8").tobytes(order="C"))
            chunks.append(level.bias.astype("<f8").tobytes(order="C"))
        else:
            chunks.append(struct.pack("<BB", _KIND_ACTIVATION, _ACTIVATION_TAGS[level.function]))
    chunks.append(struct.pack(f"<H{len(boundaries)}H", len(boundaries), *boundaries))
    return b"".join(chunks)


class _Reader:
    """Cursor over a byte buffer that fails with TruncatedModelError."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size: int, what: str) -> memoryview:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedModelError(
                f"stream truncated while reading {what}: need {size} bytes at offset "
                f"{self.offset}, only {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(data: bytes) -> ModelSpec:
    """
    Decode NIMF bytes into a ModelSpec.

    Raises:
        BadMagicError: Stream does not start with b"NIMF"
        VersionMismatchError: Unsupported format version
        TruncatedModelError: Stream ends early
        ModelFormatError: Any other structural problem
    """
    reader = _Reader(bytes(data))
    magic = bytes(reader.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = reader.unpack("<HH", "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} not supported (expected {FORMAT_VERSION})")

    levels = []
    for i in range(count):
        (kind,) = reader.unpack("<B", f"kind of level {i}")
        if kind == _KIND_AFFINE:
            out_dim, in_dim = reader.unpack("<II", f"shape of level {i}")
            weight = np.frombuffer(reader.take(8 * out_dim * in_dim, f"weights of level {i}"), dtype="<f8")
            bias = np.frombuffer(reader.take(8 * out_dim, f"biases of level {i}"), dtype="<f8")
            levels.append(AffineLevel(weight.reshape(out_dim, in_dim), bias))
        elif kind == _KIND_ACTIVATION:
            (tag,) = reader.unpack("<B", f"activation tag of level {i}")
            if tag not in _TAG_ACTIVATIONS:
                raise ModelFormatError(f"unknown activation tag {tag} at level {i}")
            levels.append(ActivationLevel(_TAG_ACTIVATIONS[tag]))
        else:
            raise ModelFormatError(f"unknown level kind {kind} at level {i}")

    (n_boundaries,) = reader.unpack("<H", "partition count")
    boundaries = reader.unpack(f"<{n_boundaries}H", "partition boundaries")
    if reader.offset != len(reader.data):
        raise ModelFormatError(f"{len(reader.data) - reader.offset} trailing bytes after partition")

    try:
        return ModelSpec(tuple(levels), LevelPartition(boundaries))
    except ValueError as e:
        raise ModelFormatError(f"decoded model is inconsistent: {e}") from e


def save_model(model: ModelSpec, path: Union[str, Path]) -> Path:
    """Write a model file and return its path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(model))
    logger.info("Model written to %s (%d levels)", path, len(model.levels))
    return path


def load_model(path: Union[str, Path]) -> ModelSpec:
    """Read a model file."""
    path = Path(path)
    model = deserialize(path.read_bytes())
    logger.debug("Model loaded from %s", path)
    return model
