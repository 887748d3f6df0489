"""Single-file binary checkpoint container.

Layout (all integers little-endian)::

    b"IEPK"  u32 version  u32 section_count
    section table, per section:
        u16 name_len, name (utf-8), u8 dtype code, u8 ndim, u64 * ndim shape,
        u64 payload offset (from file start), u64 payload length
    payloads, in table order

dtype codes: 0 = float64, 1 = int64, 2 = raw bytes (``ndim`` 1).
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IEPK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}


class CheckpointError(IOError):
    pass


def _encode(value) -> tuple[int, np.ndarray]:
    if isinstance(value, (bytes, bytearray)):
        return 2, np.frombuffer(bytes(value), dtype=np.uint8)
    if isinstance(value, str):
        return 2, np.frombuffer(value.encode(), dtype=np.uint8)
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return 0, arr.astype("<f8", copy=False)
    if arr.dtype.kind in "iub":
        return 1, arr.astype("<i8", copy=False)
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def dumps(sections: dict) -> bytes:
    encoded = [(name, *_encode(value)) for name, value in sections.items()]
    table = io.BytesIO()
    header_len = 12
    entry_lens = [2 + len(n.encode()) + 2 + 8 * a.ndim + 16 for n, _, a in encoded]
    offset = header_len + sum(entry_lens)
    payloads = []
    for name, code, arr in encoded:
        raw = np.ascontiguousarray(arr).tobytes()
        nb = name.encode()
        table.write(struct.pack("<H", len(nb)) + nb)
        table.write(struct.pack("<BB", code, arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        table.write(struct.pack("<QQ", offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)
    return MAGIC + struct.pack("<II", VERSION, len(encoded)) + table.getvalue() + b"".join(payloads)


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an IEPK checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        if code not in _DTYPES:
            raise CheckpointError(f"section {name!r}: unknown dtype code {code}")
        raw = blob[offset:offset + length]
        if len(raw) != length:
            raise CheckpointError(f"section {name!r} is truncated")
        if code == 2:
            out[name] = bytes(raw)
        else:
            out[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return out


def save(path: str | Path, sections: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(sections))
    tmp.replace(path)
    return path


def load(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def digest(sections: dict, prefixes: tuple[str, ...]) -> str:
    """SHA-256 over the encoded sections whose names start with one of ``prefixes``."""
    h = hashlib.sha256()
    for name in sorted(sections):
        if name.startswith(prefixes):
            code, arr = _encode(sections[name])
            h.update(name.encode() + bytes([code]) + str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
