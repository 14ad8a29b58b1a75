"""Named-tensor container: magic, length-prefixed JSON index, raw LE payloads.

Layout:
    8 bytes  magic b"SPSCTNS1"
    4 bytes  u32 little-endian index length
    N bytes  UTF-8 JSON index: [{"name","dtype","shape","byte_offset"}, ...]
    payload  concatenated raw little-endian tensor bytes; byte_offset is
             relative to the start of the payload section.

Supported dtypes: "f32", "f64", and "u8" (for embedded metadata blobs).
"""

from __future__ import annotations

import json

import numpy as np

from .errors import BadMagicError, FormatMismatchError, TruncatedPayloadError

MAGIC = b"SPSCTNS1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.uint8): "u8"}


def write_tensors(path, tensors: dict[str, np.ndarray]):
    """Write a name -> ndarray mapping. Iteration order is preserved on read."""
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        # np.ascontiguousarray would promote 0-d to shape (1,)
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()
        if arr.dtype not in _NAMES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        dtype_name = _NAMES[arr.dtype]
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "byte_offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)
    index_bytes = json.dumps(index).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(index_bytes).to_bytes(4, "little"))
        f.write(index_bytes)
        for raw in blobs:
            f.write(raw)


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:8]!r}")
    n = int.from_bytes(blob[8:12], "little")
    if len(blob) < 12 + n:
        raise TruncatedPayloadError(f"{path}: truncated index")
    try:
        index = json.loads(blob[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatMismatchError(f"{path}: unreadable index: {e}") from None
    payload = blob[12 + n :]

    out: dict[str, np.ndarray] = {}
    for entry in index:
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatMismatchError(f"{path}: malformed index entry {entry!r}") from None
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if off < 0 or off + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"{path}: tensor {name!r} needs bytes [{off}, {off + nbytes}) "
                f"but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape)
        out[name] = arr.copy()  # own the memory, native byte order
    return out
