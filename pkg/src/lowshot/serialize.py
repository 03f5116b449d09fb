"""Binary tensor and checkpoint formats.

Tensor blob: b"LTSR", u8 rank, rank x u32 LE extents, then float32 LE values
in row-major order.

Checkpoint file: b"LCKP", u32 LE manifest length, UTF-8 JSON manifest, then
the concatenated tensor blobs. The manifest holds ``{"tensors": [{name,
shape, offset}], "meta": {...}}`` with offsets relative to the first blob.
Checkpoints are written to a temporary file and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"LTSR"
CKPT_MAGIC = b"LCKP"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tensor_from_stream(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"truncated tensor payload: expected {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def tensor_from_bytes(buf, offset=0):
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}")
    rank = buf[offset + 4]
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 5)
    start = offset + 5 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) < start + 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)


def save_tensor(path, arr):
    _atomic_write(path, tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        return tensor_from_stream(f)


def _atomic_write(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors, meta=None):
    """Write ``{name: array}`` plus JSON-serialisable ``meta`` atomically."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        blob = tensor_to_bytes(tensors[name])
        entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}).encode()
    payload = CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)
    try:
        _atomic_write(path, payload)
    except OSError as e:
        raise OSError(f"failed to write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Return ``(tensors, meta)``."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise OSError(f"failed to read checkpoint {path}: {e}") from e
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    (mlen,) = struct.unpack("<I", buf[4:8])
    manifest = json.loads(buf[8 : 8 + mlen].decode())
    base = 8 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        arr = tensor_from_bytes(buf, base + e["offset"])
        if list(arr.shape) != e["shape"]:
            raise FormatError(f"{path}: tensor {e['name']} shape {arr.shape} disagrees with manifest {e['shape']}")
        tensors[e["name"]] = arr
    return tensors, manifest["meta"]
