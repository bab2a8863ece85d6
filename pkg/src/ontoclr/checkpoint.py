"""Checkpoint files: named float64 parameter table plus training metadata.

Layout (all little-endian):
  magic "OCCKPT01" | u32 version | u32 metadata length | metadata JSON (utf-8)
  | u32 param count | per param: u16 name length, name utf-8, u8 ndim,
  u64 dims..., raw float64 values.

Metadata must carry `step`, `seed`, and `config_hash`; callers may add more
(e.g. normalization statistics) and everything round-trips through JSON.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import FormatError

_MAGIC = b"OCCKPT01"
_VERSION = 1

REQUIRED_METADATA = ("step", "seed", "config_hash")


def save_checkpoint(path: str, params: dict[str, Tensor], metadata: dict) -> None:
    missing = [k for k in REQUIRED_METADATA if k not in metadata]
    if missing:
        raise FormatError(f"checkpoint metadata missing {missing}")
    meta_blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(view) < 16 or bytes(view[:8]) != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", view, 8)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    try:
        metadata = json.loads(bytes(view[off:off + meta_len]).decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + name_len]).decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, off)
            off += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(view, dtype="<f8", count=n, offset=off)
            off += 8 * n
            params[name] = Tensor(
                data.astype(np.float64).reshape(shape), requires_grad=True
            )
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(view):
        raise FormatError(f"{path}: {len(view) - off} trailing bytes")
    return params, metadata
