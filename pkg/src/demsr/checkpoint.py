"""EV2D checkpoint archive.

Layout (all integers little-endian)::

    b"EV2D" | version u32
    parameter table: count u32, then records
    zero or more sections: tag u8 | count u32 | records
    CRC32 u32 of everything before it

A record is ``name_len u32 | utf-8 name | dtype u8 | ndim u8 | dims u32 * ndim |
raw little-endian payload``.  Section tags: 1 optimizer state, 2
normalisation constants, 3 metadata (JSON stored as a uint8 record).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .exceptions import FormatError

MAGIC = b"EV2D"
VERSION = 1

SECTION_OPTIMIZER = 1
SECTION_NORMALIZATION = 2
SECTION_META = 3

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: Optional[Dict[str, np.ndarray]] = None
    normalization: Optional[Dict[str, np.ndarray]] = None
    meta: dict = field(default_factory=dict)


def _encode_records(records):
    parts = [struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("<"))
        if tag is None:
            raise FormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (name_len,) = self.unpack("<I")
            name = self.take(name_len).decode("utf-8")
            tag, ndim = self.unpack("<BB")
            if tag not in _DTYPES:
                raise FormatError(f"record {name!r}: unknown dtype tag {tag}")
            dims = self.unpack(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[tag]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(self.take(n_bytes), dtype=dt).reshape(dims).copy()
        return out


def _meta_record(meta):
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    return {"json": np.frombuffer(payload, dtype=np.uint8)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    body = [MAGIC, struct.pack("<I", VERSION), _encode_records(ckpt.params)]
    for tag, section in (
        (SECTION_OPTIMIZER, ckpt.optimizer),
        (SECTION_NORMALIZATION, ckpt.normalization),
        (SECTION_META, _meta_record(ckpt.meta) if ckpt.meta else None),
    ):
        if section is not None:
            body.append(struct.pack("<B", tag))
            body.append(_encode_records(section))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 12:
        raise FormatError("checkpoint too short")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("CRC mismatch; checkpoint is corrupt")
    reader = _Reader(blob[:-4])
    reader.take(4)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint(params=reader.records())
    while reader.pos < len(reader.blob):
        (tag,) = reader.unpack("<B")
        records = reader.records()
        if tag == SECTION_OPTIMIZER:
            ckpt.optimizer = records
        elif tag == SECTION_NORMALIZATION:
            ckpt.normalization = records
        elif tag == SECTION_META:
            ckpt.meta = json.loads(records["json"].tobytes().decode("utf-8"))
        else:
            raise FormatError(f"unknown section tag {tag}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically so an interrupted save never clobbers the previous file."""
    blob = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
