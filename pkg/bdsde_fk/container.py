"""
Binary container: magic, little-endian u32 header length, JSON header, then
little-endian float64 payload arrays in the order listed by the header.
"""

import json
import struct

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"BDSDEFK1"


def dumps(header, arrays):
    """
    Serialize a JSON-able header and a list of (name, array) pairs.

    The array shapes are recorded in the header under "arrays".
    """
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays]
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf8")
    chunks = [MAGIC, struct.pack("<I", len(raw_header)), raw_header]
    for _, a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(data):
    if data[:len(MAGIC)] != MAGIC:
        raise InvalidArgumentError("Not a bdsde-fk container (bad magic)")
    offset = len(MAGIC)
    (length,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    header = json.loads(data[offset:offset + length].decode("utf8"))
    offset += length
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise InvalidArgumentError(f"Trailing bytes in container ({len(data) - offset})")
    return header, arrays


def write(path, header, arrays):
    with open(path, "wb") as f:
        f.write(dumps(header, arrays))


def read(path):
    with open(path, "rb") as f:
        return loads(f.read())
