"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"FALM"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
        name_len u16, name bytes (utf-8)
        rank     u8
        dims     u32 * rank
        data     f32 * prod(dims), row-major

Values are stored float32 whatever the in-memory dtype. Non-tensor metadata
(configs, vocab tables, normalization stats) travels in a JSON sidecar next to
the weights file: `<path>.json`, written and read by the save/load helpers
here when `meta` is given.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"FALM"
VERSION = 1


def sidecar_path(path: str | os.PathLike) -> str:
    return str(path) + ".json"


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray],
                 meta: dict | None = None):
    """Write tensors (and optional JSON metadata sidecar) atomically."""
    path = str(path)
    blobs = []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(
            (t.data if isinstance(t, Tensor) else np.asarray(t)), dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor '{name}' rank {arr.ndim} exceeds format limit")
        header = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blobs.append(header + arr.tobytes())

    payload = MAGIC + struct.pack("<II", VERSION, len(blobs)) + b"".join(blobs)
    _atomic_write(path, payload)
    if meta is not None:
        _atomic_write(sidecar_path(path), json.dumps(meta, indent=1).encode("utf-8"))


def load_tensors(path: str | os.PathLike,
                 with_meta: bool = False):
    """Read a checkpoint back as {name: numpy array} (+ sidecar dict if asked)."""
    path = str(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a FALM checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name = f"#{i}"
        try:
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(buf):
                raise FormatError(f"{path}: tensor '{name}' truncated")
            arr = np.frombuffer(buf[off:end], dtype="<f4").reshape(dims)
            off = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: tensor '{name}' corrupt: {exc}") from exc
        out[name] = arr.astype(np.float32)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    if with_meta:
        meta = None
        sc = sidecar_path(path)
        if os.path.exists(sc):
            with open(sc, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        return out, meta
    return out


def _atomic_write(path: str, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
