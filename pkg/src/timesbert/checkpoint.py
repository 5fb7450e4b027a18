"""Binary checkpoint format.

Layout (little-endian)::

    b"TSBT" | u32 version | u32 config length | config (UTF-8 JSON)
    repeated: u32 name length | name | u8 dtype tag | u32 ndim | u32 dims... | f32 data
    u32 CRC32 of everything before it

Tensors are stored as float32; loading widens back to float64.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ModelParams

MAGIC = b"TSBT"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in tensors.items():
        nb = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or too short)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (truncated or corrupted)")
    version, n = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    config = json.loads(body[off : off + n].decode())
    off += n
    tensors = {}
    try:
        while off < len(body):
            (ln,) = struct.unpack_from("<I", body, off)
            name = body[off + 4 : off + 4 + ln].decode()
            off += 4 + ln
            tag, ndim = struct.unpack_from("<BI", body, off)
            off += 5
            if tag != DTYPE_F32:
                raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(body, dtype="<f4", count=count, offset=off)
            off += 4 * count
            tensors[name] = data.reshape(shape).astype(np.float64)
    except struct.error as e:
        raise CheckpointError(f"malformed tensor record: {e}") from e
    return tensors, config


def save(path, params: ModelParams, extra: dict | None = None) -> None:
    config = {"encoder": params.config.to_dict(), "n_domains": params.n_domains}
    config.update(extra or {})
    data = encode({k: t.data for k, t in params.items()}, config)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load(path) -> tuple[ModelParams, dict]:
    tensors, config = decode(Path(path).read_bytes())
    enc = EncoderConfig(**config["encoder"])
    mp = ModelParams(enc, int(config["n_domains"]))
    for name, arr in tensors.items():
        mp.add(name, arr)
    return mp, config
