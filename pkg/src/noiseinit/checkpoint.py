"""VNP1 parameter checkpoints.

Layout (little-endian)::

    "VNP1" | version u32 | config_len u32 | config JSON (UTF-8)
    | n_params u32
    | per parameter: name_len u16 | name | ndim u8 | shape u32[ndim] | f32 data
    | crc32 u32 over everything before it
"""
import json
import struct
import zlib

import numpy as np

from .pndata import PndError, atomic_write
from .vnpnet import VnpnetConfig

MAGIC = b"VNP1"
VERSION = 1


class CheckpointError(PndError):
    pass


def dumps(params, cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data):
    """Inverse of :func:`dumps`; returns ``(params, cfg)`` with float64 arrays."""
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch", len(body))
    version, clen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    cfg = VnpnetConfig.from_dict(json.loads(body[pos:pos + clen].decode("utf-8")))
    pos += clen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        params[name] = arr.astype(np.float64)
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after parameters", pos)
    return params, cfg


def save(path, params, cfg):
    with atomic_write(path) as fh:
        fh.write(dumps(params, cfg))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
