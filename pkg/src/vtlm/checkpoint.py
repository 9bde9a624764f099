"""Binary checkpoint files.

Layout: an 8-byte little-endian length followed by one UTF-8 JSON header
block, then `header["tensor_count"]` self-describing tensor records:

    u16 name length | name bytes | u8 dtype tag | u8 rank |
    u64 extent per axis | row-major little-endian payload

Only dtype tag 0 (float32) is produced. Round-trips are bitwise exact,
including optimizer state, which is what makes deterministic resume
possible.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

_DTYPE_TAGS = {0: np.dtype("<f4")}
_TAG_FOR = {np.dtype("float32"): 0}


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["tensor_count"] = len(tensors)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise DataError(f"cannot checkpoint dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path):
    """Returns (header, {name: float32 array})."""
    with open(path, "rb") as f:
        raw = f.read(8)
        if len(raw) != 8:
            raise DataError(f"{path}: truncated checkpoint header")
        (hlen,) = struct.unpack("<Q", raw)
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: corrupt header: {e}") from e
        tensors: dict[str, np.ndarray] = {}
        for _ in range(header.get("tensor_count", 0)):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", f.read(2))
            if tag not in _DTYPE_TAGS:
                raise DataError(f"{path}: unknown dtype tag {tag}")
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(count * 4)
            if len(payload) != count * 4:
                raise DataError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(payload, dtype=_DTYPE_TAGS[tag]).reshape(shape)
            tensors[name] = arr.astype(np.float32)
    return header, tensors
