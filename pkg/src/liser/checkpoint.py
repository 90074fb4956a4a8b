"""LISR1 binary container for model parameters and cached features.

Layout (all integers little-endian)::

    b"LISR1"
    u32 header length, UTF-8 JSON header
    u32 block count
    per block: u16 name length, UTF-8 name, u8 ndim, u32 x ndim dims, float64 data
    u32 CRC-32 of every byte between the magic and the checksum
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import StudentParams

MAGIC = b"LISR1"


class CheckpointError(ValueError):
    pass


def write_atomic(path, data) -> None:
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(header: dict, blocks: dict) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; ascontiguousarray would make 0-d 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def unpack(buf: bytes) -> tuple[dict, dict]:
    if buf[:5] != MAGIC:
        raise CheckpointError("bad magic, not a LISR1 container")
    if len(buf) < 13:
        raise CheckpointError("truncated container")
    payload, (crc,) = buf[5:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch, container is corrupt")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("truncated container")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after last block")
    return header, blocks


def save_container(path, header: dict, blocks: dict) -> None:
    write_atomic(path, pack(header, blocks))


def load_container(path) -> tuple[dict, dict]:
    return unpack(Path(path).read_bytes())


def save_checkpoint(path, params: StudentParams, class_names, config_digest: str = "",
                    extra: dict | None = None) -> None:
    header = {
        "kind": "student",
        "K_S": params.n_speech,
        "K_V": params.n_video,
        "class_names": list(class_names),
        "config_digest": config_digest,
        "trainable": list(params.tensors),
    }
    if extra:
        header.update(extra)
    save_container(path, header, params.arrays())


def load_checkpoint(path) -> tuple[StudentParams, dict]:
    header, blocks = load_container(path)
    if header.get("kind") != "student":
        raise CheckpointError(f"{path}: not a student checkpoint")
    params = StudentParams(int(header["K_S"]), int(header["K_V"]))
    for name in header["trainable"]:
        params.tensors[name] = T.Tensor(blocks.pop(name), requires_grad=True)
    params.buffers.update(blocks)
    return params, header
