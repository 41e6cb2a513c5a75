"""Binary tensor files, portable graymaps and atomic writes.

Tensor layout: 8-byte magic ``GTTENSR1``, little-endian u32 rank, rank u32
extents, then a little-endian float32 payload in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GTTENSR1"


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("refusing to write non-finite values")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise TensorFormatError("bad magic")
    (rank,) = struct.unpack_from("<I", blob, 8)
    offset = 12 + 4 * rank
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise TensorFormatError(f"payload holds {len(payload)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_jsonl(path):
    """Yield ``(line_number, record_or_None, error)`` for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield n, json.loads(line), None
            except json.JSONDecodeError as exc:
                yield n, None, str(exc)


def write_pgm(path, heatmap) -> None:
    """8-bit binary graymap with value round(255 * v), v clipped to [0, 1]."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError("graymap needs a 2D map")
    pix = np.rint(np.clip(h, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary graymap written by :func:`write_pgm`, scaled back to [0, 1]."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pix = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / maxval


def derive_seed(seed: int, name: str) -> int:
    """Expand one run seed into an independent per-stage seed."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
