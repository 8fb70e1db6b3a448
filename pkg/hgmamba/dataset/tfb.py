"""
TFB1 bag files

Layout (little-endian):
    header   : magic "TFB1", version u16, label u16, N u32, d u32      (16 bytes)
    coords   : N × (row i32, col i32)                                 (8N bytes)
    features : N × d float32, row-major                               (4Nd bytes)
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

# Project Imports
from hgmamba.common.errors import BadMagicError, BagFormatError, NonFiniteBagError, TruncatedBagError
from hgmamba.graph.hypergraph import TileBag

MAGIC = b"TFB1"
VERSION = 1
HEADER = struct.Struct("<4sHHII")
COORD_DTYPE = np.dtype("<i4")
FEATURE_DTYPE = np.dtype("<f4")


def expected_size(n: int, d: int) -> int:
    return HEADER.size + 8 * n + 4 * n * d


def encode_bag(bag: TileBag) -> bytes:
    n, d = bag.features.shape
    if not (0 <= bag.label < 2 ** 16):
        raise BagFormatError(f"Label {bag.label} does not fit in an unsigned 16 bit field")
    header = HEADER.pack(MAGIC, VERSION, int(bag.label), n, d)
    coords = np.ascontiguousarray(bag.coords, dtype=COORD_DTYPE).tobytes()
    features = np.ascontiguousarray(bag.features, dtype=FEATURE_DTYPE).tobytes()
    return header + coords + features


def decode_bag(data: bytes, bag_id: str = "", path: str = "") -> TileBag:
    """Parses TFB1 bytes, the features are promoted to float64"""
    if len(data) < HEADER.size:
        raise TruncatedBagError(HEADER.size, len(data), path)
    magic, version, label, n, d = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"Bad magic {magic!r} in {path or 'bag'} (expected {MAGIC!r})")
    if version != VERSION:
        raise BagFormatError(f"Unsupported TFB1 version {version} in {path or 'bag'}")
    expected = expected_size(n, d)
    if len(data) != expected:
        raise TruncatedBagError(expected, len(data), path)

    coords = np.frombuffer(data, dtype=COORD_DTYPE, count=2 * n, offset=HEADER.size).reshape(n, 2)
    features = np.frombuffer(data, dtype=FEATURE_DTYPE, count=n * d, offset=HEADER.size + 8 * n).reshape(n, d)
    if not np.all(np.isfinite(features)):
        raise NonFiniteBagError(f"Non finite feature values in {path or 'bag'}")
    return TileBag(bag_id, coords.astype(np.int64), features.astype(np.float64), int(label))


def write_bag(path: Union[str, Path], bag: TileBag):
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path: Union[str, Path]) -> TileBag:
    """Reads a bag file, the bag id is the file stem"""
    path = Path(path)
    return decode_bag(path.read_bytes(), path.stem, str(path))
