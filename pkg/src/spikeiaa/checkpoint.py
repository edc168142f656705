"""``.ubck`` parameter checkpoints.

Layout (little-endian)::

    b"UBCK" | u16 version=1 | u32 n_json | n_json bytes UTF-8 JSON config
    | u32 n_params
    | n_params x ( u32 name_len | name UTF-8 | u32 rank | rank x u32 extent
                   | prod(extents) x f32 )
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UBCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict, config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, n = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        config = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if len(buf) < pos + 4 * size:
                raise CheckpointError(f"truncated data for {name!r}")
            params[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return params, config


def save_checkpoint(path, params: dict, config: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config))


def load_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())
