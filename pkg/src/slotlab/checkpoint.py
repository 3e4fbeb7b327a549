"""SLBW weight files: magic, u32 version, then per parameter
(u32 name length, utf-8 name, u32 rank, u32 dims, float32 values), little-endian."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .scenes import FormatError

MAGIC = b"SLBW"
VERSION = 1


def encode_weights(params: dict[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> dict[str, Tensor]:
    if len(buf) < 8:
        raise FormatError("weights: truncated header", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"weights: bad magic {buf[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"weights: unsupported version {version}", 4)
    pos = 8
    out: dict[str, Tensor] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"weights: truncated {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("weights: parameter name is not utf-8", start) from None
        if name in out:
            raise FormatError(f"weights: duplicate parameter {name!r}", start)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4")
        out[name] = Tensor(values.astype(np.float32).reshape(dims))
    return out


def save_weights(params, path) -> None:
    Path(path).write_bytes(encode_weights(params))


def load_weights(path) -> dict[str, Tensor]:
    return decode_weights(Path(path).read_bytes())
