"""Binary checkpoint container for named parameter arrays.

Layout, all integers unsigned 32-bit little-endian:

    magic b"PEFT" | version | entry count | entries...

Each entry is name length, UTF-8 name bytes, rank, one dim per axis, then
the values as 32-bit little-endian floats in C order. Entries appear
sorted by name, so equal parameter sets always serialize to equal bytes.
An optional second section with the identical layout (count + entries)
holds the transfer-start snapshot; its presence is detected by trailing
bytes after the main section.

Values are stored in 32 bits while the package computes in 64, so a
load-after-save reproduces parameters only to float32 rounding.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PEFT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint bytes."""


def _pack_entries(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        encoded = name.encode("utf-8")
        # not ascontiguousarray: that would promote rank-0 entries to rank 1
        arr = np.asarray(arrays[name])
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.astype("<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def _unpack_entries(reader: _Reader) -> dict[str, np.ndarray]:
    count = reader.u32()
    arrays: dict[str, np.ndarray] = {}
    previous = None
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        if previous is not None and name <= previous:
            raise CheckpointError(f"entries not in canonical sorted order at {name!r}")
        previous = name
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(reader.take(4 * n_values), dtype="<f4")
        arrays[name] = values.astype(np.float64).reshape(shape)
    return arrays


def checkpoint_bytes(state: dict[str, np.ndarray],
                     snapshot: dict[str, np.ndarray] | None = None) -> bytes:
    blob = MAGIC + struct.pack("<I", VERSION) + _pack_entries(state)
    if snapshot is not None:
        blob += _pack_entries(snapshot)
    return blob


def parse_checkpoint(blob: bytes):
    """Returns (state, snapshot-or-None), arrays as float64."""
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state = _unpack_entries(reader)
    snapshot = None
    if not reader.done():
        snapshot = _unpack_entries(reader)
        if not reader.done():
            raise CheckpointError("trailing bytes after snapshot section")
    return state, snapshot


def save_checkpoint(path, state: dict[str, np.ndarray],
                    snapshot: dict[str, np.ndarray] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(state, snapshot))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
