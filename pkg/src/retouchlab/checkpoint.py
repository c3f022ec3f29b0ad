"""Binary checkpoint container for named tensors.

Layout (all little-endian):
  magic "RTLB" | u16 format version | u32 tensor count
  per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims,
              u8 dtype tag (0 = f32, 1 = f64), raw payload.

Round trips are bit-exact; entries are written in sorted-name order so the
same parameter set always produces the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointError

MAGIC = b"RTLB"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            tag = 0
        elif arr.dtype == np.float64:
            tag = 1
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> Dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 10
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            (tag,) = struct.unpack_from("<B", blob, off)
            off += 1
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
            dt = _DTYPE_TAGS[tag]
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = n * dt.itemsize
            arr = np.frombuffer(blob[off:off + nbytes], dtype=dt)
            if arr.size != n:
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            off += nbytes
            if name in out:
                raise CheckpointError(f"{path}: duplicate tensor '{name}'")
            out[name] = arr.reshape(dims).copy()
        if off != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return out
