"""Self-describing binary bundle: JSON header + raw little-endian float64 data.

Layout:  MAGIC | uint64-LE header length | header JSON | concatenated arrays.
The header lists array names/shapes in order, so a bundle round-trips
bit-exactly and its size is 8 bytes per parameter plus the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import CheckpointError

MAGIC = b"ECLM1\x00"


def encode_bundle(meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate array names in bundle")
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays
    )
    return MAGIC + struct.pack("<Q", len(hb)) + hb + body


def decode_bundle(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic: not a model bundle")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt bundle header: {e}") from e
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if off + nbytes > len(blob):
            raise CheckpointError("bundle truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after bundle payload")
    return header["meta"], arrays
