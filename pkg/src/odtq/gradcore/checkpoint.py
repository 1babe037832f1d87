"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"ODTQCKPT"  u32 version
    repeated:  u32 name_len, name (utf-8), u32 rank, u64 dims[rank], f64 payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..exceptions import ParseError

MAGIC = b"ODTQCKPT"
VERSION = 1


def save_checkpoint(arrays, path) -> None:
    """Write ``{name: array}`` (or a :class:`ParamStore`) in insertion order."""
    if hasattr(arrays, "snapshot"):
        arrays = arrays.snapshot()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ParseError("not an odtq checkpoint (bad magic)", path=path)
    if len(buf) < 12:
        raise ParseError("truncated checkpoint header", path=path)
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=path)
    pos, out = 12, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise struct.error("short name")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise struct.error("short payload")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint record at byte {pos}: {exc}", path=path) from None
    return out
