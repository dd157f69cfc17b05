"""Parameter blob: versioned binary file holding named float64 tensors.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"LHSPPRM1"
    8       4     u32 format version (1)
    12      4     u32 scale factor
    16      4     u32 tensor count T
    20      ...   T tensor headers:
                    u16 name length L, L bytes UTF-8 name,
                    u8 rank R, R x u32 extents
    ...     ...   tensor data, float64 little-endian, row-major, in header order
    ...     4     u32 length E of the trailer
    ...     E     trailer: UTF-8 JSON object (network config and, in
                  checkpoints, iteration, RNG state and the training log)

The LSP tensors come first, followed by the HSP tensors.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np

MAGIC = b"LHSPPRM1"
VERSION = 1


class BlobError(ValueError):
    pass


def encode(scale: int, tensors: dict[str, np.ndarray], extra: Optional[dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, scale, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
    for t in tensors.values():
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    trailer = json.dumps(extra or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(trailer)) + trailer)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[int, dict[str, np.ndarray], dict]:
    """Returns ``(scale, tensors, extra)``."""
    if buf[:8] != MAGIC:
        raise BlobError("not a parameter file (bad magic)")
    try:
        version, scale, count = struct.unpack_from("<III", buf, 8)
        if version != VERSION:
            raise BlobError(f"unsupported parameter file version {version}")
        pos = 20
        shapes = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            shapes.append((name, shape))
        tensors = {}
        for name, shape in shapes:
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            tensors[name] = data.astype(np.float64).reshape(shape)
            pos += 8 * size
        (e,) = struct.unpack_from("<I", buf, pos)
        trailer = buf[pos + 4 : pos + 4 + e]
        if len(trailer) != e:
            raise BlobError("truncated parameter file")
        extra = json.loads(trailer.decode("utf-8")) if e else {}
    except (struct.error, ValueError) as exc:
        if isinstance(exc, BlobError):
            raise
        raise BlobError(f"corrupt parameter file ({exc})") from exc
    return scale, tensors, extra


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_blob(path, scale: int, tensors: dict[str, np.ndarray], extra: Optional[dict] = None) -> None:
    atomic_write(path, encode(scale, tensors, extra))


def read_blob(path) -> tuple[int, dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise BlobError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return decode(buf)
    except BlobError as exc:
        raise BlobError(f"{path}: {exc}") from exc


def save_model(path, model, extra: Optional[dict] = None) -> None:
    info = {"config": model.config.to_dict()}
    info.update(extra or {})
    write_blob(path, model.config.scale, model.named_tensors(), info)


def load_model(path):
    """Returns ``(model, extra)``."""
    from .network import NetConfig, build_model

    scale, tensors, extra = read_blob(path)
    if "config" not in extra:
        raise BlobError(f"{path}: no network configuration (is this a kernel file?)")
    config = NetConfig.from_dict(extra["config"])
    if config.scale != scale:
        raise BlobError(f"{path}: header scale {scale} disagrees with config scale {config.scale}")
    try:
        return build_model(config, tensors), extra
    except KeyError as exc:
        raise BlobError(f"{path}: missing tensor {exc}") from exc
