"""
HGCK checkpoint container

Layout (little-endian):
    header : magic "HGCK", version u16, reserved u16, tensor count u32
    tensor : name length u16, UTF-8 name, ndim u8, shape u32 × ndim, float64 payload (row-major)
"""
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

# Project Imports
from hgmamba.common.errors import CheckpointFormatError

MAGIC = b"HGCK"
VERSION = 1
HEADER = struct.Struct("<4sHHI")
NAME_LENGTH = struct.Struct("<H")
NDIM = struct.Struct("<B")
PAYLOAD_DTYPE = np.dtype("<f8")


def encode_checkpoint(arrays: Dict[str, np.ndarray]) -> bytes:
    chunks = [HEADER.pack(MAGIC, VERSION, 0, len(arrays))]
    for name, array in arrays.items():
        encoded_name = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(NAME_LENGTH.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(NDIM.pack(array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"Truncated checkpoint {self.path}: needs {self.offset + size} bytes, "
                                        f"got {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data: bytes, path: str = "checkpoint") -> Dict[str, np.ndarray]:
    reader = _Reader(data, path)
    magic, version, _, count = reader.unpack(HEADER)
    if magic != MAGIC:
        raise CheckpointFormatError(f"Bad magic {magic!r} in {path} (expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} in {path}")
    arrays = OrderedDict()
    for _ in range(count):
        name_length, = reader.unpack(NAME_LENGTH)
        name = reader.take(name_length).decode("utf-8")
        ndim, = reader.unpack(NDIM)
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(PAYLOAD_DTYPE.itemsize * size), dtype=PAYLOAD_DTYPE) \
            .reshape(shape).astype(np.float64)
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes in {path}")
    return arrays


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]):
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"The checkpoint file {path} does not exist")
    return decode_checkpoint(path.read_bytes(), str(path))
