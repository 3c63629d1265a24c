"""SMCK checkpoint files: a JSON config blob plus named float32 parameter arrays.

Layout (little-endian): magic ``SMCK``, version u32, config length u64 and
UTF-8 JSON, entry count u32, then per entry: name length u32, name bytes,
ndim u32, ndim x u64 dims, float32 data.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SMCK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for malformed SMCK files."""


def save_checkpoint(path: str | Path, config: dict, params: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointFormatError(f"{path}: truncated header")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    version, blob_len = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    off = 16
    try:
        config = json.loads(raw[off : off + blob_len].decode("utf-8"))
        off += blob_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(raw):
                raise CheckpointFormatError(f"{path}: truncated data for {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt payload ({exc})") from None
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return config, params
